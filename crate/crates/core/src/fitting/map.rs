//! Simultaneous fit of resonance ridges from a membrane–backstop map.
//!
//! Each observation is a point on the ridge of longitudinal mode
//! `N + mode_id`: with the membrane actuator at `piezo_x_raw` and the
//! backstop actuator at `piezo_l_raw`, the cavity is resonant with the laser
//! detuned by `detuning_raw` (rad/s). The model balances
//!
//! `D(Δx) + j + o = 2ΔL/λ_N + δ/ω_FSR`
//!
//! in units of the free spectral range, where `D` is the MATE closed-form
//! detuning, `j` the relative mode index, `Δx = S_x(piezo_x_raw)` and
//! `ΔL = S_L(piezo_l_raw)` polynomial stretches, and `o` a common offset
//! that absorbs the constant term of `S_L`. Adjacent modes are one free
//! spectral range apart, which calibrates the backstop gain.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_positive, Error, Result};
use crate::fitting::lsq::{least_squares_solve, FitProblem, FitResult, LsqOptions, Parameter};
use crate::fitting::stretch::PolyStretch;
use crate::optics::{slab_coefficients, thin_sheet_coefficients, CavityGeometry, MembraneCoeffs, MembraneSpec, SPEED_OF_LIGHT};
use crate::resonance::{lossless_parts, mate_phase, solve_resonant_k};

/// One ridge observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapPoint {
    pub piezo_x_raw: f64,
    pub piezo_l_raw: f64,
    /// Longitudinal index relative to the reference mode `N`.
    pub mode_id: i64,
    /// Laser detuning at which the ridge was recorded, rad/s.
    pub detuning_raw: f64,
}

/// How the fit parameterizes the membrane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MembraneModel {
    /// Dielectric slab of index `n`; the thickness is fitted.
    Slab { n: f64 },
    /// Thin polarizable sheet of index `n`; the thickness is fitted.
    ThinSheet { n: f64 },
    /// `|r_m|` and `φ_r` fitted directly.
    Coefficients,
}

impl MembraneModel {
    fn names(&self) -> &'static [&'static str] {
        match self {
            MembraneModel::Slab { .. } | MembraneModel::ThinSheet { .. } => &["d"],
            MembraneModel::Coefficients => &["r_mag", "r_phase"],
        }
    }

    /// Membrane coefficients at wavenumber `k` from the leading parameters.
    pub fn coefficients(&self, p: &[f64], k: f64) -> Result<MembraneCoeffs> {
        match *self {
            MembraneModel::Slab { n } => slab_coefficients(n, p[0].abs(), k),
            MembraneModel::ThinSheet { n } => thin_sheet_coefficients(n, p[0].abs(), k),
            MembraneModel::Coefficients => MembraneCoeffs::lossless(p[0].abs().min(1.0 - 1e-15), p[1]),
        }
    }
}

/// Starting point and fixed context of a map fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapFitConfig {
    pub length_l: f64,
    pub mode_index_n: u64,
    pub membrane_model: MembraneModel,
    /// Initial membrane parameters: `[d, 0]` for thickness models,
    /// `[|r|, φ_r]` for coefficients.
    pub membrane_init: [f64; 2],
    /// Initial gain of the membrane stretch, m per normalized unit.
    pub scale_x: f64,
    /// Initial gain of the backstop stretch, m per normalized unit.
    pub scale_l: f64,
    /// Membrane displacement at the center of the raw range, m.
    pub offset_x: f64,
    /// Number of starting offsets tried across one λ/2 period.
    pub starts: usize,
}

/// Outcome of a map fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapFit {
    pub fit: FitResult,
    pub stretch_x: PolyStretch,
    pub stretch_l: PolyStretch,
    /// Fitted membrane coefficients at the reference mode.
    pub membrane: MembraneCoeffs,
    /// Fitted thickness, for thickness models.
    pub thickness_d: Option<f64>,
    /// Per-mode offsets `j + o` in units of ω_FSR.
    pub offsets: BTreeMap<i64, f64>,
    pub monotone: bool,
    /// Set when a fitted stretch is not monotone over the data.
    pub invalid_fit: bool,
}

struct Layout {
    n_membrane: usize,
}

impl Layout {
    fn sx(&self) -> usize {
        self.n_membrane
    }
    fn sl(&self) -> usize {
        self.n_membrane + 5
    }
    fn offset(&self) -> usize {
        self.n_membrane + 9
    }
    fn stretch_x(&self, p: &[f64], center: f64, half: f64) -> PolyStretch {
        let s = self.sx();
        PolyStretch {
            center,
            half_range: half,
            scale: p[s],
            coeffs: [p[s + 1], p[s + 2], p[s + 3], p[s + 4]],
        }
    }
    fn stretch_l(&self, p: &[f64], center: f64, half: f64) -> PolyStretch {
        let s = self.sl();
        PolyStretch {
            center,
            half_range: half,
            scale: p[s],
            coeffs: [0.0, p[s + 1], p[s + 2], p[s + 3]],
        }
    }
}

fn range(v: impl Iterator<Item = f64>) -> (f64, f64) {
    v.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)))
}

/// Fits all ridges at once with shared membrane parameters and one stretch
/// per axis.
pub fn fit_resonance_map(points: &[MapPoint], config: &MapFitConfig) -> Result<MapFit> {
    ensure_positive("cavity length", config.length_l)?;
    if config.mode_index_n == 0 {
        return Err(Error::invalid("mode index N must be ≥ 1"));
    }
    let mut modes: Vec<i64> = points.iter().map(|p| p.mode_id).collect();
    modes.sort_unstable();
    modes.dedup();
    if modes.len() < 3 {
        return Err(Error::invalid(format!("need at least 3 mode traces, got {}", modes.len())));
    }
    if modes.iter().any(|&m| (config.mode_index_n as i64) + m < 1) {
        return Err(Error::invalid("mode_id places a trace below the first longitudinal mode"));
    }
    let (xlo, xhi) = range(points.iter().map(|p| p.piezo_x_raw));
    let (llo, lhi) = range(points.iter().map(|p| p.piezo_l_raw));
    if !(xhi > xlo) || !(lhi > llo) {
        return Err(Error::invalid("raw actuator axes must span a nonzero range"));
    }
    let (xc, xh) = (0.5 * (xlo + xhi), 0.5 * (xhi - xlo));
    let (lc, lh) = (0.5 * (llo + lhi), 0.5 * (lhi - llo));
    let l = config.length_l;
    let n0 = config.mode_index_n;
    let lambda_n = 2.0 * l / n0 as f64;
    let fsr = PI * SPEED_OF_LIGHT / l;
    let slots: Vec<usize> = points
        .iter()
        .map(|p| modes.binary_search(&p.mode_id).expect("mode listed"))
        .collect();
    let layout = Layout {
        n_membrane: config.membrane_model.names().len(),
    };
    let model = config.membrane_model;
    let ks: Vec<f64> = modes.iter().map(|&m| PI * (n0 as i64 + m) as f64 / l).collect();
    // Ridge-balance residual in units of ω_FSR.
    let residual = |p: &[f64]| -> Vec<f64> {
        let coeffs: Option<Vec<(f64, f64)>> = ks
            .iter()
            .map(|&k| {
                let c = model.coefficients(p, k).ok()?;
                lossless_parts(&c, "map fit").ok()
            })
            .collect();
        let Some(coeffs) = coeffs else {
            return vec![f64::NAN; points.len()];
        };
        let sx = layout.stretch_x(p, xc, xh);
        let sl = layout.stretch_l(p, lc, lh);
        points
            .iter()
            .zip(&slots)
            .map(|(pt, &s)| {
                let dx = sx.eval(pt.piezo_x_raw);
                let (r, phi) = coeffs[s];
                let model_v = mate_phase(dx, ks[s], r, phi) / PI + pt.mode_id as f64 + p[layout.offset()];
                let data_v = 2.0 * sl.eval(pt.piezo_l_raw) / lambda_n + pt.detuning_raw / fsr;
                model_v - data_v
            })
            .collect()
    };

    let mut base = Vec::new();
    let membrane_names = model.names();
    match model {
        MembraneModel::Coefficients => {
            base.push(Parameter::new(membrane_names[0], config.membrane_init[0]).bounded(0.0, 1.0 - 1e-9).with_scale(0.1));
            base.push(Parameter::new(membrane_names[1], config.membrane_init[1]).with_scale(1.0));
        }
        _ => base.push(Parameter::new(membrane_names[0], config.membrane_init[0]).bounded(0.0, 1e-5).with_scale(lambda_n / 20.0)),
    }
    let scale_x = if config.scale_x != 0.0 { config.scale_x } else { lambda_n / 4.0 };
    let scale_l = if config.scale_l != 0.0 { config.scale_l } else { lambda_n };
    base.push(Parameter::new("stretch_x_scale", scale_x).with_scale(scale_x.abs()));
    for name in ["stretch_x_c0", "stretch_x_c2", "stretch_x_c3", "stretch_x_c4"] {
        base.push(Parameter::new(name, 0.0).with_scale(0.01));
    }
    base.push(Parameter::new("stretch_l_scale", scale_l).with_scale(scale_l.abs()));
    for name in ["stretch_l_c2", "stretch_l_c3", "stretch_l_c4"] {
        base.push(Parameter::new(name, 0.0).with_scale(0.01));
    }
    base.push(Parameter::new("offset", 0.0).with_scale(0.1));

    // Starts spread the membrane offset across one period; the common
    // offset starts at the mean misfit.
    let starts = config.starts.max(1);
    let period_u = 0.5 * lambda_n / scale_x.abs();
    let fits: Vec<Result<FitResult>> = (0..starts)
        .into_par_iter()
        .map(|i| {
            let mut params = base.clone();
            params[layout.sx() + 1].value = config.offset_x / scale_x + period_u * i as f64 / starts as f64;
            let values: Vec<f64> = params.iter().map(|p| p.value).collect();
            let r0 = residual(&values);
            params[layout.offset()].value = -r0.iter().sum::<f64>() / r0.len() as f64;
            let problem = FitProblem::new(params, &residual).with_options(LsqOptions {
                sigma_known: false,
                max_iterations: 400,
                // Resonance roots carry ~1e-13 relative noise.
                relative_step: 3e-5,
                ..LsqOptions::default()
            });
            least_squares_solve(&problem)
        })
        .collect();
    let mut best: Option<FitResult> = None;
    let mut last_err = None;
    for f in fits {
        match f {
            Ok(f) => {
                if best.as_ref().is_none_or(|b| f.chi2 < b.chi2) {
                    best = Some(f);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    let fit = match (best, last_err) {
        (Some(f), _) => f,
        (None, Some(e)) => return Err(e),
        (None, None) => unreachable!("at least one start"),
    };
    let values = fit.values();
    let stretch_x = layout.stretch_x(&values, xc, xh);
    let stretch_l = layout.stretch_l(&values, lc, lh);
    let monotone = stretch_x.is_monotone_over(xlo, xhi) && stretch_l.is_monotone_over(llo, lhi);
    let membrane = model.coefficients(&values, PI * n0 as f64 / l)?;
    let thickness_d = match model {
        MembraneModel::Coefficients => None,
        _ => Some(values[0].abs()),
    };
    let offsets = modes.iter().map(|&m| (m, m as f64 + values[layout.offset()])).collect();
    Ok(MapFit {
        fit,
        stretch_x,
        stretch_l,
        membrane,
        thickness_d,
        offsets,
        monotone,
        invalid_fit: !monotone,
    })
}

/// Generating parameters of a synthetic ridge map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapTruth {
    pub length_l: f64,
    pub mode_index_n: u64,
    pub membrane: MembraneSpec,
    pub stretch_x: PolyStretch,
    pub stretch_l: PolyStretch,
    /// Relative mode indices of the generated traces.
    pub modes: Vec<i64>,
    /// Common offset `o` in units of ω_FSR.
    pub offset: f64,
    /// Use the exact resonance condition instead of the closed form.
    pub exact: bool,
}

/// Ridge points on the given raw membrane grid with Gaussian noise of
/// standard deviation `noise_fsr`·ω_FSR on the detuning.
pub fn synthesize_map(truth: &MapTruth, piezo_x_grid: &[f64], noise_fsr: f64, seed: u64) -> Result<Vec<MapPoint>> {
    let l = truth.length_l;
    let n0 = truth.mode_index_n;
    let lambda_n = 2.0 * l / n0 as f64;
    let fsr = PI * SPEED_OF_LIGHT / l;
    let sl = truth.stretch_l;
    let (lo, hi) = (sl.center - 3.0 * sl.half_range, sl.center + 3.0 * sl.half_range);
    if !sl.is_monotone_over(lo, hi) {
        return Err(Error::invalid("backstop stretch must be monotone within three half ranges of its center"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_fsr.abs()).map_err(|e| Error::invalid(e.to_string()))?;
    let mut out = Vec::with_capacity(truth.modes.len() * piezo_x_grid.len());
    for &mode in &truth.modes {
        let branch = u64::try_from(n0 as i64 + mode).map_err(|_| Error::invalid("mode below N = 1"))?;
        let k = PI * branch as f64 / l;
        for &px in piezo_x_grid {
            let dx = truth.stretch_x.eval(px);
            let d = if truth.exact {
                let g = CavityGeometry::new(l, dx, branch)?;
                let sol = solve_resonant_k(&g, &truth.membrane, branch)?;
                (sol.wavenumber_k - k) * l / PI
            } else {
                let c = truth.membrane.coefficients_at(k)?;
                let (r, phi) = lossless_parts(&c, "synthesize_map")?;
                mate_phase(dx, k, r, phi) / PI
            };
            let v = d + mode as f64 + truth.offset;
            let pl = sl.invert(0.5 * v * lambda_n, lo, hi)?;
            let det = if noise_fsr > 0.0 { noise.sample(&mut rng) * fsr } else { 0.0 };
            out.push(MapPoint {
                piezo_x_raw: px,
                piezo_l_raw: pl,
                mode_id: mode,
                detuning_raw: det,
            });
        }
    }
    Ok(out)
}
