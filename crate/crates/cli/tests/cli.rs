use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mate-optix"));
    c.env_remove("MATE_OPTIX_LOG");
    c
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn run(args: &[&str], out: &Path) -> Output {
    bin().args(args).arg("--out").arg(out).output().unwrap()
}

fn ok(args: &[&str], out: &Path) -> Output {
    let o = run(args, out);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn header(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

fn column(path: &Path, name: &str) -> Vec<f64> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let i = r.headers().unwrap().iter().position(|h| h == name).unwrap();
    r.records().map(|rec| rec.unwrap()[i].parse().unwrap()).collect()
}

fn parameter(fit: &Value, name: &str) -> (f64, f64) {
    let p = fit["fit"]["parameters"]
        .as_array()
        .unwrap()
        .iter()
        .find(|p| p["name"] == name)
        .unwrap_or_else(|| panic!("no parameter {name}"));
    (p["value"].as_f64().unwrap(), p["uncertainty"].as_f64().unwrap())
}

/// One-line `error[tag]: ...` message on stderr.
fn assert_error(o: &Output, code: i32, tag: &str) {
    assert_eq!(o.status.code(), Some(code), "{}", String::from_utf8_lossy(&o.stderr));
    let err = String::from_utf8_lossy(&o.stderr);
    let lines: Vec<&str> = err.lines().filter(|l| l.starts_with("error[")).collect();
    assert_eq!(lines.len(), 1, "{err}");
    assert!(lines[0].starts_with(&format!("error[{tag}]: ")), "{err}");
}

#[test]
fn forward_commands_write_their_schemas() {
    let d = tempfile::tempdir().unwrap();
    let o = d.path();
    ok(&["tilt"], o);
    assert_eq!(header(&o.join("tilt.csv")), "lambda_m,p_t,p_t_untilted");
    let t = json(&o.join("tilt.json"));
    assert_eq!(t["model"], "analytic");
    assert_eq!(t["expansion_valid"], true);

    ok(&["resonances"], o);
    assert_eq!(
        header(&o.join("resonances.csv")),
        "dx_m,x_m,omega_rad_s,detuning_fsr,closed_form_detuning_fsr,kappa_rad_s"
    );
    let exact = column(&o.join("resonances.csv"), "detuning_fsr");
    let closed = column(&o.join("resonances.csv"), "closed_form_detuning_fsr");
    for (a, b) in exact.iter().zip(&closed) {
        assert!((a - b).abs() < 1e-3, "{a} vs {b}");
    }

    ok(&["couplings"], o);
    assert_eq!(
        header(&o.join("couplings.csv")),
        "dx_m,g1,g2,kappa,b_tilde,a1_tilde,a2_tilde,pure_flag"
    );
    let e = json(&o.join("extrema.json"));
    assert_eq!(e["placement"], "mate_input");
    assert!(e["pure_quadratic"].as_array().is_some());
}

#[test]
fn spectrum_writes_map_and_sweep() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("c.toml");
    fs::write(&cfg, "[spectrum]\nx_points = 5\ndetuning_points = 9001\n").unwrap();
    ok(&["--config", cfg.to_str().unwrap(), "spectrum"], d.path());
    assert_eq!(header(&d.path().join("map.csv")), "x_m,detuning_rad_s,reflection");
    assert_eq!(header(&d.path().join("sweep.csv")), "x_m,detuning_rad_s,kappa_rad_s,r_res");
    let refl = column(&d.path().join("map.csv"), "reflection");
    assert_eq!(refl.len(), 5 * 9001);
    assert!(refl.iter().all(|r| (0.0..=1.0 + 1e-12).contains(r)));
    let kappa = column(&d.path().join("sweep.csv"), "kappa_rad_s");
    assert_eq!(kappa.len(), 5);
    assert!(kappa.iter().all(|k| k.is_finite() && *k > 0.0));
}

#[test]
fn thin_membrane_ratios() {
    let d = tempfile::tempdir().unwrap();
    let cfg = fixture("couplings_thin.toml");
    ok(&["--config", cfg.to_str().unwrap(), "couplings"], d.path());
    let r = &json(&d.path().join("extrema.json"))["ratios"];
    let close = |key: &str, want: f64, rel: f64| {
        let got = r[key].as_f64().unwrap();
        assert!((got / want - 1.0).abs() < rel, "{key}: {got} vs {want}");
    };
    close("t_m", 0.1, 1e-9);
    close("b", 15.4, 0.01);
    close("g2", 2.6e3, 0.01);
    close("a2", 7.70, 0.01);
}

#[test]
fn transparent_membrane_has_no_coupling() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("r0.toml");
    fs::write(&cfg, "[membrane]\nmodel = \"thin\"\nr_mag = 0.0\n").unwrap();
    ok(&["--config", cfg.to_str().unwrap(), "couplings"], d.path());
    ok(&["--config", cfg.to_str().unwrap(), "resonances"], d.path());
    let c = d.path().join("couplings.csv");
    for name in ["g1", "g2", "b_tilde", "a1_tilde", "a2_tilde"] {
        assert!(column(&c, name).iter().all(|v| *v == 0.0), "{name}");
    }
    let w = column(&d.path().join("resonances.csv"), "omega_rad_s");
    assert!(w.iter().all(|v| *v == w[0]));
}

#[test]
fn pure_quadratic_rows_are_flagged() {
    let d = tempfile::tempdir().unwrap();
    ok(&["couplings"], d.path());
    let c = d.path().join("couplings.csv");
    let g1 = column(&c, "g1");
    let g2 = column(&c, "g2");
    let flag = column(&c, "pure_flag");
    assert!(flag.iter().any(|f| *f == 1.0));
    let scale = g1.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for ((a, b), f) in g1.iter().zip(&g2).zip(&flag) {
        if *f == 1.0 {
            assert!(a.abs() < 1e-6 * scale, "{a}");
            assert!(b.abs() > 0.0);
        }
    }
}

#[test]
fn loss_fixture_recovers_generating_values() {
    let d = tempfile::tempdir().unwrap();
    let input = fixture("loss.csv");
    ok(&["fit", "loss", "--input", input.to_str().unwrap()], d.path());
    let fit = json(&d.path().join("fit.json"));
    let truth = json(&fixture("loss_truth.json"));
    assert_eq!(fit["converged"], true);
    for name in ["eps", "t1_sq", "s1", "t2_sq"] {
        let (v, s) = parameter(&fit, name);
        let t = truth[name].as_f64().unwrap();
        assert!((v - t).abs() < 3.0 * s, "{name}: {v} ± {s} vs {t}");
    }
    let bound = fit["finesse_bound"].as_f64().unwrap();
    assert!((bound - 2.0 * std::f64::consts::PI / parameter(&fit, "s1").0).abs() < 1e-6 * bound);
    assert_eq!(
        header(&d.path().join("residuals.csv")),
        "x_m,kappa_model_rad_s,r_res_model,residual_kappa,residual_r"
    );
}

#[test]
fn transmission_fixture_gives_order_24() {
    let d = tempfile::tempdir().unwrap();
    let input = fixture("transmission.csv");
    ok(&["fit", "transmission", "--input", input.to_str().unwrap()], d.path());
    let fit = json(&d.path().join("fit.json"));
    assert_eq!(fit["l0"], 24);
    assert_eq!(fit["ambiguous"], false);
    assert!(fit["near_ties"].as_array().unwrap().is_empty());
}

#[test]
fn map_fixture_underestimates_thickness() {
    let d = tempfile::tempdir().unwrap();
    let input = fixture("map.csv");
    ok(&["fit", "map", "--input", input.to_str().unwrap()], d.path());
    let fit = json(&d.path().join("fit.json"));
    assert_eq!(fit["converged"], true);
    let t = fit["thickness_d"].as_f64().unwrap();
    assert!(t > 0.0 && t < 88e-9, "{t}");
}

#[test]
fn empty_input_exits_2() {
    let d = tempfile::tempdir().unwrap();
    let empty = d.path().join("empty.csv");
    fs::write(&empty, "").unwrap();
    for p in ["map", "loss", "transmission"] {
        let o = run(&["fit", p, "--input", empty.to_str().unwrap()], d.path());
        assert_error(&o, 2, "input");
    }
    let headed = d.path().join("headed.csv");
    fs::write(&headed, "x_m,kappa_rad_s,r_res,sigma_kappa,sigma_r\n").unwrap();
    assert_error(&run(&["fit", "loss", "--input", headed.to_str().unwrap()], d.path()), 2, "input");
}

#[test]
fn schema_violations_name_the_line() {
    let d = tempfile::tempdir().unwrap();
    let bad = d.path().join("bad.csv");
    fs::write(&bad, "x_m,kappa_rad_s,r_res,sigma_kappa,sigma_r\n2.1e-5,3e7,0.6,3e5,0.006\n2.2e-5,oops,0.6,3e5,0.006\n")
        .unwrap();
    let o = run(&["fit", "loss", "--input", bad.to_str().unwrap()], d.path());
    assert_error(&o, 2, "input");
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3"));

    let header_only = d.path().join("cols.csv");
    fs::write(&header_only, "mode_l,lambda_m,p_t\n0,1.55e-6,0.1\n").unwrap();
    let o = run(&["fit", "transmission", "--input", header_only.to_str().unwrap()], d.path());
    assert_error(&o, 2, "input");
    assert!(String::from_utf8_lossy(&o.stderr).contains("sigma"));
}

#[test]
fn bad_configs_and_arguments_exit_2() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("bad.toml");
    fs::write(&cfg, "[cavity]\nbogus = 1\n").unwrap();
    assert_error(&run(&["--config", cfg.to_str().unwrap(), "tilt"], d.path()), 2, "input");
    fs::write(&cfg, "[cavity]\nlength_l = -1.0\n").unwrap();
    let o = run(&["--config", cfg.to_str().unwrap(), "resonances"], d.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error["));
    assert_error(&run(&["frobnicate"], d.path()), 2, "input");
    assert_error(&run(&["fit", "loss"], d.path()), 2, "input");
    let missing = d.path().join("missing.toml");
    assert_error(&run(&["--config", missing.to_str().unwrap(), "tilt"], d.path()), 2, "input");
}

#[test]
fn non_convergence_exits_3_after_writing() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("cap.toml");
    fs::write(&cfg, "[fit.loss]\nmax_iterations = 1\n").unwrap();
    let input = fixture("loss.csv");
    let o = run(
        &["--config", cfg.to_str().unwrap(), "fit", "loss", "--input", input.to_str().unwrap()],
        d.path(),
    );
    assert_error(&o, 3, "fit");
    assert_eq!(json(&d.path().join("fit.json"))["converged"], false);
    assert!(d.path().join("residuals.csv").exists());
}

#[test]
fn help_exits_0() {
    let o = bin().arg("--help").output().unwrap();
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("couplings"));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [a.path(), b.path()] {
        ok(&["--seed", "11", "synth", "transmission"], dir);
        ok(&["--seed", "11", "synth", "loss"], dir);
        let input = dir.join("loss.csv");
        ok(&["fit", "loss", "--input", input.to_str().unwrap()], dir);
        ok(&["couplings"], dir);
        ok(&["tilt"], dir);
    }
    for f in [
        "transmission.csv",
        "loss.csv",
        "truth.json",
        "fit.json",
        "residuals.csv",
        "couplings.csv",
        "extrema.json",
        "tilt.csv",
        "tilt.json",
    ] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn thread_count_does_not_change_results() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let input = fixture("loss.csv");
    ok(&["--threads", "1", "fit", "loss", "--input", input.to_str().unwrap()], a.path());
    ok(&["--threads", "4", "fit", "loss", "--input", input.to_str().unwrap()], b.path());
    assert_eq!(fs::read(a.path().join("fit.json")).unwrap(), fs::read(b.path().join("fit.json")).unwrap());
}
