use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use log::{info, warn};
use mate_optix::couplings::{
    coupling_report, enhancement_ratios, extremal_couplings, pure_point_dissipative, pure_quadratic_points,
    CouplingExtremum, EnhancementRatios, Placement,
};
use mate_optix::fitting::{
    fit_loss_budget, fit_resonance_map, fit_transmission_global, loss_forward, synthesize_loss, synthesize_map,
    synthesize_transmission, transmission_forward, FitResult, LossFitConfig, LossPoint, MapFitConfig, MapPoint,
    MapTruth, PolyStretch, TiltParameters, TransmissionFitConfig, TransmissionPoint, TransmissionTruth,
};
use mate_optix::optics::Mirror;
use mate_optix::resonance::{detuning_mate_fsr, detuning_mim_fsr, trace_branch};
use mate_optix::spectra::{resonance_dip, spectrum_map};
use mate_optix::tilt::{airy_transmission, wavelength_spectrum, TiltModel, TiltedCavity, EXPANSION_LIMIT};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{linspace, RunConfig};
use crate::failure::Failure;
use crate::io::{float, output_dir, read_rows, write_json, Table};

pub struct Context {
    pub config: RunConfig,
    pub out: PathBuf,
    pub seed: u64,
    pub input: Option<PathBuf>,
}

impl Context {
    fn out_file(&self, name: &str) -> Result<PathBuf, Failure> {
        Ok(output_dir(&self.out)?.join(name))
    }

    fn input_path(&self) -> Result<&Path, Failure> {
        self.input
            .as_deref()
            .or(self.config.fit.input.as_deref())
            .ok_or_else(|| Failure::input("no data file: pass --input or set fit.input"))
    }
}

pub fn spectrum(ctx: &Context) -> Result<(), Failure> {
    let cfg = &ctx.config;
    let s = &cfg.spectrum;
    let model = cfg.cavity_model()?;
    let xs = linspace(s.x_min, s.x_max, s.x_points, "spectrum x grid")?;
    let half = 0.5 * model.fsr();
    let det = linspace(
        s.detuning_min.unwrap_or(-half),
        s.detuning_max.unwrap_or(half),
        s.detuning_points,
        "spectrum detuning grid",
    )?;
    let map = spectrum_map(&model, &xs, &det)?;
    let mut t = Table::new(&["x_m", "detuning_rad_s", "reflection"]);
    for (x, row) in map.x_grid.iter().zip(&map.values) {
        for (d, v) in map.detuning_grid.iter().zip(row) {
            t.push_floats(&[*x, *d, *v]);
        }
    }
    t.write(&ctx.out_file("map.csv")?)?;

    // A dip that cannot be located (no coupling into the cavity) is
    // reported as NaN rather than failing the whole sweep.
    let dips: Vec<_> = xs.par_iter().map(|&x| resonance_dip(&model, x)).collect();
    let mut sweep = Table::new(&["x_m", "detuning_rad_s", "kappa_rad_s", "r_res"]);
    let mut missing = 0;
    for (x, d) in xs.iter().zip(dips) {
        match d {
            Ok(d) => sweep.push_floats(&[*x, d.detuning, d.kappa, d.r_res]),
            Err(e) => {
                if missing == 0 {
                    warn!("no reflection dip at x = {x:e} m: {e}");
                }
                missing += 1;
                sweep.push_floats(&[*x, f64::NAN, f64::NAN, f64::NAN]);
            }
        }
    }
    if missing > 0 {
        warn!("{missing} of {} positions have no measurable dip", xs.len());
    }
    sweep.write(&ctx.out_file("sweep.csv")?)
}

#[derive(Serialize)]
struct PurePoint {
    dx: f64,
    g2: f64,
    b_tilde: f64,
}

#[derive(Serialize)]
struct Extrema {
    placement: Placement,
    mode_index_n: u64,
    r_mag: f64,
    t_mag: f64,
    x_zpf: f64,
    extrema: Vec<CouplingExtremum>,
    pure_quadratic: Vec<PurePoint>,
    /// MATE over MIM maxima with their small-|t_m| limits; absent when the
    /// membrane is fully reflective or transparent.
    ratios: Option<EnhancementRatios>,
}

pub fn couplings(ctx: &Context) -> Result<(), Failure> {
    let cfg = &ctx.config;
    let c = &cfg.couplings;
    let membrane = cfg.membrane()?;
    let (m1, m2) = (cfg.mirror1.mirror()?, cfg.mirror2.mirror()?);
    let l = cfg.cavity.length_l;
    let n = cfg.mode_index()?;
    let mode = cfg.mechanical_mode()?;
    let k_n = PI * n as f64 / l;
    let coeffs = membrane.coefficients_at(k_n)?;

    let geometry = c.placement.geometry();
    let pure: Vec<f64> = if c.placement == Placement::Mim {
        Vec::new()
    } else {
        pure_quadratic_points(&membrane, n, l)?
    };
    // The grid plus every purely quadratic point inside it.
    let mut dxs = linspace(c.dx_min, c.dx_max, c.dx_points, "couplings dx grid")?;
    let period = l / n as f64;
    for &p in &pure {
        let mut q = p;
        while q <= c.dx_max {
            if q >= c.dx_min {
                dxs.push(q);
            }
            q += period;
        }
    }
    dxs.sort_by(f64::total_cmp);
    dxs.dedup();

    let rows: Vec<_> = dxs
        .par_iter()
        .map(|&dx| coupling_report(dx, n, &membrane, &m1, &m2, l, &mode, c.placement))
        .collect::<Result<_, _>>()?;
    let g1_max = rows.iter().map(|r| r.g1.abs()).fold(0.0, f64::max);
    let mut t = Table::new(&["dx_m", "g1", "g2", "kappa", "b_tilde", "a1_tilde", "a2_tilde", "pure_flag"]);
    for r in &rows {
        let pure_flag = g1_max > 0.0 && r.g1.abs() <= c.pure_threshold * g1_max;
        let mut row: Vec<String> = [r.dx, r.g1, r.g2, r.kappa, r.b_tilde, r.a1_tilde, r.a2_tilde]
            .iter()
            .map(|&v| float(v))
            .collect();
        row.push(u8::from(pure_flag).to_string());
        t.push(row);
    }
    t.write(&ctx.out_file("couplings.csv")?)?;

    let partial = coeffs.r_mag > 0.0 && coeffs.t_mag > 0.0;
    let pure_quadratic = if partial && c.placement != Placement::Mim {
        let b = pure_point_dissipative(&membrane, &mode, l, n, c.placement)?;
        b.into_iter()
            .map(|(dx, b_tilde)| -> Result<PurePoint, Failure> {
                let r = coupling_report(dx.max(f64::MIN_POSITIVE), n, &membrane, &m1, &m2, l, &mode, c.placement)?;
                Ok(PurePoint { dx, g2: r.g2, b_tilde })
            })
            .collect::<Result<_, _>>()?
    } else {
        Vec::new()
    };
    let ratios = if partial {
        Some(enhancement_ratios(&membrane, l, n, &m1, &mode)?)
    } else {
        warn!("membrane with |r_m| = {} has no coupling enhancement to report", coeffs.r_mag);
        None
    };
    let report = Extrema {
        placement: c.placement,
        mode_index_n: n,
        r_mag: coeffs.r_mag,
        t_mag: coeffs.t_mag,
        x_zpf: mode.x_zpf(),
        extrema: if partial { extremal_couplings(&membrane, l, n, geometry)? } else { Vec::new() },
        pure_quadratic,
        ratios,
    };
    write_json(&ctx.out_file("extrema.json")?, &report)
}

pub fn resonances(ctx: &Context) -> Result<(), Failure> {
    let cfg = &ctx.config;
    let r = &cfg.resonances;
    let membrane = cfg.membrane()?;
    let (m1, m2) = (cfg.mirror1.mirror()?, cfg.mirror2.mirror()?);
    let l = cfg.cavity.length_l;
    let n = cfg.mode_index()?;
    let dxs = linspace(r.dx_min, r.dx_max, r.dx_points, "resonances dx grid")?;
    let xs: Vec<f64> = dxs.iter().map(|&d| r.placement.position(d, l)).collect();
    let sols = trace_branch(&xs, n, &membrane, &m1, &m2, l)?;
    let w_fsr = PI * mate_optix::SPEED_OF_LIGHT / l;
    let mut t = Table::new(&[
        "dx_m",
        "x_m",
        "omega_rad_s",
        "detuning_fsr",
        "closed_form_detuning_fsr",
        "kappa_rad_s",
    ]);
    for (dx, s) in dxs.iter().zip(&sols) {
        let closed = match r.placement {
            Placement::Mim => detuning_mim_fsr(*dx, n, &membrane, l)?,
            Placement::MateInput => detuning_mate_fsr(*dx, n, &membrane, l)?,
            Placement::MateBackstop => f64::NAN,
        };
        t.push_floats(&[
            *dx,
            s.membrane_x,
            s.omega,
            s.omega / w_fsr - n as f64,
            closed,
            s.kappa.unwrap_or(f64::NAN),
        ]);
    }
    t.write(&ctx.out_file("resonances.csv")?)
}

#[derive(Serialize)]
struct TiltSummary {
    model: TiltModel,
    x0: f64,
    theta: f64,
    beam_sigma: f64,
    phi: f64,
    k_theta_sigma: f64,
    expansion_valid: bool,
    peak_lambda: f64,
    peak_transmission: f64,
}

pub fn tilt(ctx: &Context) -> Result<(), Failure> {
    let cfg = &ctx.config;
    let t = &cfg.tilt;
    let lambdas = linspace(t.lambda_min, t.lambda_max, t.lambda_points, "tilt wavelength grid")?;
    let mirror = Mirror::lossless(1.0 - t.r1_sq)?;
    let mirror = Mirror::new(mirror.r_mag, t.phi1, mirror.t_mag, 0.0)?;
    let k_ref = 4.0 * PI / (t.lambda_min + t.lambda_max);
    let cavity = TiltedCavity::new(t.x0, t.theta, t.beam_sigma, mirror, cfg.membrane()?, k_ref)?;
    let p = wavelength_spectrum(&cavity, &lambdas, t.model)?;
    let flat: Vec<f64> = lambdas
        .iter()
        .map(|&lam| airy_transmission(cavity.x0, 2.0 * PI / lam, &cavity.mirror1, &cavity.membrane))
        .collect::<Result<_, _>>()?;
    let mut table = Table::new(&["lambda_m", "p_t", "p_t_untilted"]);
    for ((l, v), f) in lambdas.iter().zip(&p).zip(&flat) {
        table.push_floats(&[*l, *v, *f]);
    }
    table.write(&ctx.out_file("tilt.csv")?)?;
    let ipk = (0..p.len()).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap_or(0);
    let s = lambdas
        .iter()
        .map(|&lam| cavity.tilt_parameter(2.0 * PI / lam))
        .fold(0.0, f64::max);
    if t.model == TiltModel::Analytic && s >= EXPANSION_LIMIT {
        warn!("kθσ reaches {s:.3}; the expansion is outside its validity range");
    }
    let summary = TiltSummary {
        model: t.model,
        x0: cavity.x0,
        theta: cavity.theta,
        beam_sigma: cavity.sigma,
        phi: cavity.phi,
        k_theta_sigma: s,
        expansion_valid: s < EXPANSION_LIMIT,
        peak_lambda: lambdas[ipk],
        peak_transmission: p[ipk],
    };
    write_json(&ctx.out_file("tilt.json")?, &summary)
}

fn check_finite(values: &[(&str, f64)], line: usize) -> Result<(), Failure> {
    for (name, v) in values {
        if !v.is_finite() {
            return Err(Failure::input(format!("line {line}: {name} is not finite")));
        }
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
struct MapRow {
    piezo_x_raw: f64,
    #[serde(rename = "piezo_L_raw")]
    piezo_l_raw: f64,
    mode_id: i64,
    detuning_raw: f64,
}

pub const MAP_COLUMNS: [&str; 4] = ["piezo_x_raw", "piezo_L_raw", "mode_id", "detuning_raw"];
pub const LOSS_COLUMNS: [&str; 5] = ["x_m", "kappa_rad_s", "r_res", "sigma_kappa", "sigma_r"];
pub const TRANSMISSION_COLUMNS: [&str; 4] = ["mode_l", "lambda_m", "p_t", "sigma"];

#[derive(Serialize)]
struct Report<'a, T: Serialize> {
    pipeline: &'static str,
    converged: bool,
    #[serde(flatten)]
    result: &'a T,
}

fn finish<T: Serialize>(ctx: &Context, pipeline: &'static str, fit: &FitResult, result: &T) -> Result<(), Failure> {
    let report = Report {
        pipeline,
        converged: fit.converged,
        result,
    };
    write_json(&ctx.out_file("fit.json")?, &report)?;
    if fit.degenerate {
        warn!("parameters degenerate (condition {:.3e}): {:?}", fit.condition_number, fit.degenerate_parameters);
    }
    if fit.converged {
        info!("{pipeline} fit converged after {} iterations, χ² = {:.6e}", fit.iterations, fit.chi2);
        Ok(())
    } else {
        Err(Failure::fit(format!("{pipeline} fit did not converge: {}", fit.message)))
    }
}

pub fn fit_map(ctx: &Context) -> Result<(), Failure> {
    let cfg = &ctx.config;
    let rows: Vec<MapRow> = read_rows(ctx.input_path()?, &MAP_COLUMNS)?;
    let mut points = Vec::with_capacity(rows.len());
    for (i, r) in rows.iter().enumerate() {
        check_finite(
            &[("piezo_x_raw", r.piezo_x_raw), ("piezo_L_raw", r.piezo_l_raw), ("detuning_raw", r.detuning_raw)],
            i + 2,
        )?;
        points.push(MapPoint {
            piezo_x_raw: r.piezo_x_raw,
            piezo_l_raw: r.piezo_l_raw,
            mode_id: r.mode_id,
            detuning_raw: r.detuning_raw,
        });
    }
    let m = &cfg.fit.map;
    let config = MapFitConfig {
        length_l: cfg.cavity.length_l,
        mode_index_n: cfg.mode_index()?,
        membrane_model: m.model(),
        membrane_init: m.membrane_init(),
        scale_x: m.scale_x,
        scale_l: m.scale_l,
        offset_x: m.offset_x,
        starts: m.starts,
    };
    let fit = fit_resonance_map(&points, &config)?;
    if fit.invalid_fit {
        warn!("fitted actuator stretch is not monotone over the data");
    }
    let mut t = Table::new(&["piezo_x_raw", "piezo_L_raw", "mode_id", "residual_fsr"]);
    for (p, r) in points.iter().zip(&fit.fit.residuals) {
        t.push(vec![float(p.piezo_x_raw), float(p.piezo_l_raw), p.mode_id.to_string(), float(*r)]);
    }
    t.write(&ctx.out_file("residuals.csv")?)?;
    finish(ctx, "map", &fit.fit, &fit)
}

fn loss_config(cfg: &RunConfig) -> Result<LossFitConfig, Failure> {
    Ok(LossFitConfig {
        length_l: cfg.cavity.length_l,
        mode_index_n: cfg.mode_index()?,
        membrane: cfg.membrane()?,
        init: cfg.fit.loss.init(),
        max_iterations: cfg.fit.loss.max_iterations,
    })
}

pub fn fit_loss(ctx: &Context) -> Result<(), Failure> {
    let cfg = &ctx.config;
    let points: Vec<LossPoint> = read_rows(ctx.input_path()?, &LOSS_COLUMNS)?;
    for (i, p) in points.iter().enumerate() {
        check_finite(
            &[
                ("x_m", p.x_m),
                ("kappa_rad_s", p.kappa_rad_s),
                ("r_res", p.r_res),
                ("sigma_kappa", p.sigma_kappa),
                ("sigma_r", p.sigma_r),
            ],
            i + 2,
        )?;
    }
    let config = loss_config(cfg)?;
    let fit = fit_loss_budget(&points, &config)?;
    let xs: Vec<f64> = points.iter().map(|p| p.x_m).collect();
    let model = loss_forward(&fit.budget, &config, &xs)?;
    let mut t = Table::new(&["x_m", "kappa_model_rad_s", "r_res_model", "residual_kappa", "residual_r"]);
    for (i, (p, (k, r))) in points.iter().zip(&model).enumerate() {
        t.push_floats(&[p.x_m, *k, *r, fit.fit.residuals[2 * i], fit.fit.residuals[2 * i + 1]]);
    }
    t.write(&ctx.out_file("residuals.csv")?)?;
    finish(ctx, "loss", &fit.fit, &fit)
}

fn transmission_config(cfg: &RunConfig) -> Result<TransmissionFitConfig, Failure> {
    let s = &cfg.fit.transmission;
    let mut c = TransmissionFitConfig::new(cfg.membrane()?, s.init());
    c.phi1 = s.phi1;
    c.beam_sigma = s.beam_sigma;
    c.l0_range = (s.l0_min, s.l0_max);
    c.min_order = s.min_order;
    c.lambda_ref = s.lambda_ref;
    Ok(c)
}

pub fn fit_transmission(ctx: &Context) -> Result<(), Failure> {
    let cfg = &ctx.config;
    let points: Vec<TransmissionPoint> = read_rows(ctx.input_path()?, &TRANSMISSION_COLUMNS)?;
    for (i, p) in points.iter().enumerate() {
        check_finite(&[("lambda_m", p.lambda_m), ("p_t", p.p_t), ("sigma", p.sigma)], i + 2)?;
    }
    let config = transmission_config(cfg)?;
    let fit = fit_transmission_global(&points, &config)?;
    if fit.ambiguous {
        warn!("l0 = {} is not uniquely determined; near ties: {:?}", fit.l0, fit.near_ties);
    }
    let mut t = Table::new(&["mode_l", "lambda_m", "p_t", "p_t_model", "residual"]);
    for pk in &fit.peaks {
        let rows: Vec<&TransmissionPoint> = points.iter().filter(|p| p.mode_l == pk.mode_l).collect();
        let lambdas: Vec<f64> = rows.iter().map(|p| p.lambda_m).collect();
        let model = transmission_forward(&config, &fit.params, fit.l0, pk.mode_l, pk.lambda_peak, &lambdas)?;
        for (p, m) in rows.iter().zip(model) {
            let w = if p.sigma > 0.0 { p.sigma } else { 1.0 };
            t.push(vec![
                p.mode_l.to_string(),
                float(p.lambda_m),
                float(p.p_t),
                float(m),
                float((m - p.p_t) / w),
            ]);
        }
    }
    t.write(&ctx.out_file("residuals.csv")?)?;
    finish(ctx, "transmission", &fit.fit, &fit)
}

/// Actuator stretches of the synthetic ridge map: a 0..100 raw sweep covering
/// a little more than one λ/2 period of the membrane, and a backstop sweep
/// spanning several free spectral ranges.
pub fn synthetic_map_truth(cfg: &RunConfig) -> Result<MapTruth, Failure> {
    Ok(MapTruth {
        length_l: cfg.cavity.length_l,
        mode_index_n: cfg.mode_index()?,
        membrane: cfg.membrane()?,
        stretch_x: PolyStretch::new(50.0, 50.0, 0.55e-6, [38.0, 0.06, -0.03, 0.02])?,
        stretch_l: PolyStretch::new(50.0, 50.0, 1.3e-6, [0.0, 0.05, 0.02, -0.01])?,
        modes: vec![-1, 0, 1],
        offset: 0.3,
        exact: cfg.synth.map_exact,
    })
}

pub fn synth_map(ctx: &Context) -> Result<(), Failure> {
    let cfg = &ctx.config;
    let truth = synthetic_map_truth(cfg)?;
    let grid = linspace(0.0, 100.0, cfg.synth.map_points, "synthetic map grid")?;
    let pts = synthesize_map(&truth, &grid, cfg.synth.noise, ctx.seed)?;
    let mut t = Table::new(&MAP_COLUMNS);
    for p in &pts {
        t.push(vec![
            float(p.piezo_x_raw),
            float(p.piezo_l_raw),
            p.mode_id.to_string(),
            float(p.detuning_raw),
        ]);
    }
    t.write(&ctx.out_file("map.csv")?)?;
    write_json(&ctx.out_file("truth.json")?, &truth)
}

pub fn synth_loss(ctx: &Context) -> Result<(), Failure> {
    let cfg = &ctx.config;
    let s = &cfg.synth;
    let truth = mate_optix::fitting::LossBudget {
        eps: s.loss_truth_eps,
        t1_sq: s.loss_truth_t1_sq,
        s1: s.loss_truth_s1,
        t2_sq: s.loss_truth_t2_sq,
    };
    let xs = linspace(s.loss_x_min, s.loss_x_max, s.loss_x_points, "synthetic loss grid")?;
    let pts = synthesize_loss(&truth, &loss_config(cfg)?, &xs, s.noise, ctx.seed)?;
    let mut t = Table::new(&LOSS_COLUMNS);
    for p in &pts {
        t.push_floats(&[p.x_m, p.kappa_rad_s, p.r_res, p.sigma_kappa, p.sigma_r]);
    }
    t.write(&ctx.out_file("loss.csv")?)?;
    write_json(&ctx.out_file("truth.json")?, &truth)
}

/// Peak wavelengths scattered by a fraction of a nanometre around 1550 nm.
pub fn synthetic_transmission_truth(cfg: &RunConfig) -> TransmissionTruth {
    let s = &cfg.synth;
    TransmissionTruth {
        l0: s.transmission_l0,
        params: TiltParameters {
            r1_sq: s.transmission_r1_sq,
            theta0: s.transmission_theta0,
            a: s.transmission_a,
        },
        peaks: (0..s.transmission_spectra)
            .map(|j| (j, 1550e-9 + 0.4e-9 * ((j % 5) - 2) as f64))
            .collect(),
    }
}

pub fn synth_transmission(ctx: &Context) -> Result<(), Failure> {
    let cfg = &ctx.config;
    let s = &cfg.synth;
    let truth = synthetic_transmission_truth(cfg);
    let grid = linspace(
        s.transmission_lambda_min,
        s.transmission_lambda_max,
        s.transmission_lambda_points,
        "synthetic transmission grid",
    )?;
    let pts = synthesize_transmission(&truth, &transmission_config(cfg)?, &grid, s.noise, ctx.seed)?;
    let mut t = Table::new(&TRANSMISSION_COLUMNS);
    for p in &pts {
        t.push(vec![p.mode_l.to_string(), float(p.lambda_m), float(p.p_t), float(p.sigma)]);
    }
    t.write(&ctx.out_file("transmission.csv")?)?;
    write_json(&ctx.out_file("truth.json")?, &truth)
}
