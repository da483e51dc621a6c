//! Joint fit of decay rate and resonant reflection versus membrane position
//! to the transfer-matrix model: mode matching `ε`, input transmission
//! `|t₁|²`, input-mirror loss `S₁` and back-mirror loss `|t₂|²`.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_positive, Error, Result};
use crate::fitting::lsq::{least_squares_solve, FitProblem, FitResult, LsqOptions, Parameter};
use crate::optics::{MembraneSpec, Mirror};
use crate::spectra::{resonance_dip, CavityModel};

/// Decay rate and resonant reflection measured at one membrane position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub x_m: f64,
    pub kappa_rad_s: f64,
    pub r_res: f64,
    /// 1σ of `kappa_rad_s`; zero when unknown.
    pub sigma_kappa: f64,
    /// 1σ of `r_res`; zero when unknown.
    pub sigma_r: f64,
}

/// The four loss-budget parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBudget {
    pub eps: f64,
    pub t1_sq: f64,
    pub s1: f64,
    pub t2_sq: f64,
}

impl LossBudget {
    pub const NAMES: [&'static str; 4] = ["eps", "t1_sq", "s1", "t2_sq"];

    pub fn as_array(&self) -> [f64; 4] {
        [self.eps, self.t1_sq, self.s1, self.t2_sq]
    }

    /// Cavity model with these losses.
    pub fn model(&self, membrane: MembraneSpec, length_l: f64, mode_index_n: u64) -> Result<CavityModel> {
        CavityModel::new(
            Mirror::lossless(self.t1_sq)?.with_loss(self.s1)?,
            Mirror::lossless(self.t2_sq)?,
            membrane,
            length_l,
            self.eps,
            mode_index_n,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossFitConfig {
    pub length_l: f64,
    pub mode_index_n: u64,
    pub membrane: MembraneSpec,
    pub init: LossBudget,
    pub max_iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossFit {
    pub fit: FitResult,
    pub budget: LossBudget,
    /// Finesse ceiling `2π/S₁` set by the input-mirror loss alone.
    pub finesse_bound: f64,
}

/// Forward model: `(κ, R_res)` at each position.
pub fn loss_forward(budget: &LossBudget, config: &LossFitConfig, xs: &[f64]) -> Result<Vec<(f64, f64)>> {
    let model = budget.model(config.membrane, config.length_l, config.mode_index_n)?;
    xs.par_iter()
        .enumerate()
        .map(|(i, &x)| {
            resonance_dip(&model, x)
                .map(|d| (d.kappa, d.r_res))
                .map_err(|e| Error::at_index(i, e))
        })
        .collect()
}

pub fn fit_loss_budget(points: &[LossPoint], config: &LossFitConfig) -> Result<LossFit> {
    ensure_positive("cavity length", config.length_l)?;
    if points.len() < 3 {
        return Err(Error::invalid(format!("need at least 3 positions, got {}", points.len())));
    }
    let weighted = points.iter().all(|p| p.sigma_kappa > 0.0 && p.sigma_r > 0.0);
    let unweighted = points.iter().all(|p| p.sigma_kappa == 0.0 && p.sigma_r == 0.0);
    if !weighted && !unweighted {
        return Err(Error::invalid("uncertainties must be all positive or all zero"));
    }
    let kappa_unit = points.iter().map(|p| p.kappa_rad_s.abs()).sum::<f64>() / points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.x_m).collect();
    let residual = |p: &[f64]| -> Vec<f64> {
        let budget = LossBudget {
            eps: p[0],
            t1_sq: p[1],
            s1: p[2],
            t2_sq: p[3],
        };
        let Ok(pred) = loss_forward(&budget, config, &xs) else {
            return vec![f64::NAN; 2 * points.len()];
        };
        let mut out = Vec::with_capacity(2 * points.len());
        for (pt, (k, r)) in points.iter().zip(&pred) {
            let (sk, sr) = if weighted { (pt.sigma_kappa, pt.sigma_r) } else { (kappa_unit, 1.0) };
            out.push((k - pt.kappa_rad_s) / sk);
            out.push((r - pt.r_res) / sr);
        }
        out
    };
    let init = config.init;
    let params = vec![
        Parameter::new("eps", init.eps).bounded(0.0, 1.0).with_scale(0.1),
        Parameter::new("t1_sq", init.t1_sq).bounded(1e-12, 1.0).with_scale(init.t1_sq.abs().max(1e-6)),
        Parameter::new("s1", init.s1).bounded(0.0, 1.0).with_scale(init.s1.abs().max(1e-6)),
        Parameter::new("t2_sq", init.t2_sq).bounded(0.0, 1.0).with_scale(init.t2_sq.abs().max(1e-6)),
    ];
    let problem = FitProblem::new(params, residual).with_options(LsqOptions {
        sigma_known: weighted,
        // Dip widths carry ~1e-13 relative rounding from the round-trip phase,
        // so a finer difference step would be dominated by that noise.
        relative_step: 3e-5,
        max_iterations: config.max_iterations,
        ..LsqOptions::default()
    });
    let fit = least_squares_solve(&problem)?;
    let v = fit.values();
    let budget = LossBudget {
        eps: v[0],
        t1_sq: v[1],
        s1: v[2],
        t2_sq: v[3],
    };
    let finesse_bound = if budget.s1 > 0.0 { 2.0 * PI / budget.s1 } else { f64::INFINITY };
    Ok(LossFit {
        fit,
        budget,
        finesse_bound,
    })
}

/// Noisy `(κ, R_res)` data from the forward model, with Gaussian errors of
/// relative size `noise` on both observables and matching uncertainties.
pub fn synthesize_loss(
    truth: &LossBudget,
    config: &LossFitConfig,
    xs: &[f64],
    noise: f64,
    seed: u64,
) -> Result<Vec<LossPoint>> {
    let pred = loss_forward(truth, config, xs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    Ok(xs
        .iter()
        .zip(pred)
        .map(|(&x, (k, r))| {
            let (sk, sr) = (noise * k, noise * r);
            let (nk, nr) = if noise > 0.0 {
                (unit.sample(&mut rng), unit.sample(&mut rng))
            } else {
                (0.0, 0.0)
            };
            LossPoint {
                x_m: x,
                kappa_rad_s: k + sk * nk,
                r_res: r + sr * nr,
                sigma_kappa: sk,
                sigma_r: sr,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn nominal() -> LossBudget {
        LossBudget {
            eps: 0.75,
            t1_sq: 7.5e-3,
            s1: 8.0e-4,
            t2_sq: 6e-4,
        }
    }

    fn config(init: LossBudget) -> LossFitConfig {
        LossFitConfig {
            length_l: 0.1,
            mode_index_n: 129_032,
            membrane: MembraneSpec::slab(2.0, 88e-9).unwrap(),
            init,
            max_iterations: 200,
        }
    }

    fn xs() -> Vec<f64> {
        (0..41).map(|i| 21e-6 + 0.8e-6 * i as f64 / 40.0).collect()
    }

    fn start() -> LossBudget {
        LossBudget {
            eps: 0.6,
            t1_sq: 6e-3,
            s1: 1.2e-3,
            t2_sq: 1e-3,
        }
    }

    #[test]
    fn noiseless_round_trip() {
        let data = synthesize_loss(&nominal(), &config(nominal()), &xs(), 0.0, 0).unwrap();
        let fit = fit_loss_budget(&data, &config(start())).unwrap();
        assert!(fit.fit.converged, "{}", fit.fit.message);
        for (got, want) in fit.budget.as_array().iter().zip(nominal().as_array()) {
            assert!((got / want - 1.0).abs() < 1e-3, "{got} {want}");
        }
        assert!(fit.fit.chi2 < 1e-12, "{}", fit.fit.chi2);
        assert!((fit.finesse_bound - 2.0 * PI / 8.0e-4).abs() < 10.0);
    }

    #[test]
    fn finesse_bound_value() {
        assert!((2.0 * PI / 8.0e-4 - 7853.98).abs() < 0.01);
    }

    #[test]
    fn noisy_fit_reports_uncertainties() {
        let data = synthesize_loss(&nominal(), &config(nominal()), &xs(), 0.01, 11).unwrap();
        let fit = fit_loss_budget(&data, &config(start())).unwrap();
        assert!(fit.fit.converged, "{}", fit.fit.message);
        for (i, name) in LossBudget::NAMES.iter().enumerate() {
            let s = fit.fit.uncertainty(name).unwrap();
            assert!(s > 0.0);
            assert!((fit.budget.as_array()[i] - nominal().as_array()[i]).abs() < 5.0 * s, "{name}");
        }
        assert_eq!(fit.fit.correlation.len(), 4);
    }

    #[test]
    fn mixed_uncertainties_rejected() {
        let mut data = synthesize_loss(&nominal(), &config(nominal()), &xs(), 0.01, 1).unwrap();
        data[3].sigma_r = 0.0;
        assert!(fit_loss_budget(&data, &config(start())).is_err());
        assert!(fit_loss_budget(&data[..2], &config(start())).is_err());
    }
}
