//! Bounded Levenberg–Marquardt with numeric Jacobians.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One fit parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub name: String,
    pub value: f64,
    pub lower: f64,
    pub upper: f64,
    pub fixed: bool,
    /// Typical magnitude; floors the finite-difference step for parameters
    /// near zero.
    pub scale: f64,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: f64) -> Self {
        Self {
            name: name.into(),
            value,
            lower: f64::NEG_INFINITY,
            upper: f64::INFINITY,
            fixed: false,
            scale: value.abs().max(1e-300),
        }
    }

    pub fn bounded(mut self, lower: f64, upper: f64) -> Self {
        self.lower = lower;
        self.upper = upper;
        self
    }

    pub fn fixed(mut self, fixed: bool) -> Self {
        self.fixed = fixed;
        self
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LsqOptions {
    pub max_iterations: usize,
    /// Convergence threshold on the scaled gradient
    /// `max_j |J_jᵀr| / (‖J_j‖‖r‖)`.
    pub gradient_tol: f64,
    /// Relative step of the central-difference Jacobian.
    pub relative_step: f64,
    /// Step-size stall threshold, relative to the parameter magnitude.
    pub step_tol: f64,
    /// χ² at or below this counts as an exact fit.
    pub chi2_floor: f64,
    /// Relative size of an undamped Gauss–Newton step that counts as
    /// converged (parameters resolved to rounding).
    pub resolution: f64,
    /// When no damped step lowers χ², the fit still counts as converged
    /// if the undamped step would lower it by less than this, in units of
    /// the residual variance: the step is then well inside the parameter
    /// uncertainties and only rounding is left.
    pub decrease_tol: f64,
    /// Whether the residuals are already divided by known per-point σ.
    /// Otherwise the covariance is scaled by the reduced χ².
    pub sigma_known: bool,
    /// Condition number of the normalized normal matrix above which the
    /// fit is flagged as degenerate.
    pub degeneracy_condition: f64,
}

impl Default for LsqOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            gradient_tol: 1e-8,
            relative_step: 1e-6,
            step_tol: 1e-14,
            chi2_floor: 0.0,
            resolution: 1e-12,
            decrease_tol: 1e-6,
            sigma_known: true,
            degeneracy_condition: 1e8,
        }
    }
}

type Residual<'a> = dyn Fn(&[f64]) -> Vec<f64> + Sync + 'a;

/// A weighted least-squares problem: the residual maps the full parameter
/// vector to `(model − data)/σ`.
pub struct FitProblem<'a> {
    pub parameters: Vec<Parameter>,
    pub residual: Box<Residual<'a>>,
    pub options: LsqOptions,
}

impl<'a> FitProblem<'a> {
    pub fn new(parameters: Vec<Parameter>, residual: impl Fn(&[f64]) -> Vec<f64> + Sync + 'a) -> Self {
        Self {
            parameters,
            residual: Box::new(residual),
            options: LsqOptions::default(),
        }
    }

    pub fn with_options(mut self, options: LsqOptions) -> Self {
        self.options = options;
        self
    }
}

/// Best-fit value and 1σ uncertainty of one parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedParameter {
    pub name: String,
    pub value: f64,
    pub uncertainty: f64,
    pub fixed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub parameters: Vec<FittedParameter>,
    /// Names of the free parameters, in covariance order.
    pub free_names: Vec<String>,
    pub covariance: Vec<Vec<f64>>,
    pub correlation: Vec<Vec<f64>>,
    pub chi2: f64,
    pub reduced_chi2: f64,
    pub dof: usize,
    pub residuals: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Final scaled gradient.
    pub gradient: f64,
    pub condition_number: f64,
    pub degenerate: bool,
    /// Free parameters participating in near-null directions.
    pub degenerate_parameters: Vec<String>,
    pub message: String,
}

impl FitResult {
    pub fn value(&self, name: &str) -> Option<f64> {
        self.parameters.iter().find(|p| p.name == name).map(|p| p.value)
    }

    pub fn uncertainty(&self, name: &str) -> Option<f64> {
        self.parameters.iter().find(|p| p.name == name).map(|p| p.uncertainty)
    }

    pub fn values(&self) -> Vec<f64> {
        self.parameters.iter().map(|p| p.value).collect()
    }
}

struct Evaluator<'p, 'a> {
    problem: &'p FitProblem<'a>,
    free: Vec<usize>,
    base: Vec<f64>,
}

impl Evaluator<'_, '_> {
    fn full(&self, p: &[f64]) -> Vec<f64> {
        let mut all = self.base.clone();
        for (&i, &v) in self.free.iter().zip(p) {
            all[i] = v;
        }
        all
    }

    fn residual(&self, p: &[f64]) -> Result<DVector<f64>> {
        let all = self.full(p);
        let r = (self.problem.residual)(&all);
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteResidual { params: all });
        }
        Ok(DVector::from_vec(r))
    }

    fn clamp(&self, p: &mut [f64]) {
        for (&i, v) in self.free.iter().zip(p.iter_mut()) {
            let prm = &self.problem.parameters[i];
            *v = v.clamp(prm.lower, prm.upper);
        }
    }

    fn jacobian(&self, p: &[f64], r0: &DVector<f64>) -> Result<DMatrix<f64>> {
        let opts = &self.problem.options;
        let cols: Vec<Result<Vec<f64>>> = (0..p.len())
            .into_par_iter()
            .map(|j| {
                let prm = &self.problem.parameters[self.free[j]];
                let h = opts.relative_step * p[j].abs().max(prm.scale.abs());
                let (mut up, mut dn) = (p.to_vec(), p.to_vec());
                up[j] = (p[j] + h).min(prm.upper);
                dn[j] = (p[j] - h).max(prm.lower);
                let width = up[j] - dn[j];
                if width <= 0.0 {
                    return Ok(vec![0.0; r0.len()]);
                }
                let ru = if up[j] == p[j] { r0.clone() } else { self.residual(&up)? };
                let rd = if dn[j] == p[j] { r0.clone() } else { self.residual(&dn)? };
                Ok(ru.iter().zip(rd.iter()).map(|(a, b)| (a - b) / width).collect())
            })
            .collect();
        let mut j = DMatrix::zeros(r0.len(), p.len());
        for (c, col) in cols.into_iter().enumerate() {
            for (i, v) in col?.into_iter().enumerate() {
                j[(i, c)] = v;
            }
        }
        Ok(j)
    }
}

/// The undamped Gauss–Newton step, when it is below `resolution` relative
/// to every free parameter: the residual left over is then rounding noise.
fn gauss_newton_resolved(
    a: &DMatrix<f64>,
    g: &DVector<f64>,
    p: &[f64],
    scales: &[f64],
    resolution: f64,
) -> Option<DVector<f64>> {
    let mut m = a.clone();
    for i in 0..p.len() {
        m[(i, i)] *= 1.0 + 1e-12;
    }
    let step = m.cholesky()?.solve(&(-g));
    step.iter()
        .zip(p.iter().zip(scales))
        .all(|(d, (v, s))| d.is_finite() && d.abs() <= resolution * v.abs().max(*s))
        .then_some(step)
}

/// χ² decrease promised by the undamped Gauss–Newton step, `gᵀ(JᵀJ)⁻¹g`.
fn predicted_decrease(a: &DMatrix<f64>, g: &DVector<f64>) -> Option<f64> {
    let mut m = a.clone();
    for i in 0..g.len() {
        m[(i, i)] *= 1.0 + 1e-12;
    }
    let d = g.dot(&m.cholesky()?.solve(g));
    d.is_finite().then_some(d)
}

fn scaled_gradient(j: &DMatrix<f64>, r: &DVector<f64>) -> f64 {
    let rn = r.norm();
    if rn == 0.0 {
        return 0.0;
    }
    let g = j.transpose() * r;
    (0..j.ncols())
        .map(|c| {
            let cn = j.column(c).norm();
            if cn == 0.0 {
                0.0
            } else {
                g[c].abs() / (cn * rn)
            }
        })
        .fold(0.0, f64::max)
}

/// Minimizes `Σ rᵢ²` with bounded Levenberg–Marquardt.
///
/// Damping follows Nielsen's gain-ratio update with Marquardt's diagonal
/// scaling. Convergence means the scaled gradient fell below
/// `gradient_tol`, χ² reached `chi2_floor`, or the undamped Gauss–Newton
/// step shrank below `resolution` (exact data fitted to rounding); stalls
/// and iteration limits return `converged = false`.
pub fn least_squares_solve(problem: &FitProblem) -> Result<FitResult> {
    let free: Vec<usize> = (0..problem.parameters.len())
        .filter(|&i| !problem.parameters[i].fixed)
        .collect();
    if free.is_empty() {
        return Err(Error::invalid("fit needs at least one free parameter"));
    }
    for p in &problem.parameters {
        if !p.value.is_finite() || p.value < p.lower || p.value > p.upper {
            return Err(Error::invalid(format!(
                "initial value of '{}' ({}) outside bounds [{}, {}]",
                p.name, p.value, p.lower, p.upper
            )));
        }
    }
    let ev = Evaluator {
        problem,
        free: free.clone(),
        base: problem.parameters.iter().map(|p| p.value).collect(),
    };
    let opts = &problem.options;
    let mut p: Vec<f64> = free.iter().map(|&i| problem.parameters[i].value).collect();
    let mut r = ev.residual(&p)?;
    let n_data = r.len();
    let mut chi2 = r.norm_squared();
    let mut jac = ev.jacobian(&p, &r)?;
    // Dimensionless: the damping term is `μ·diag(JᵀJ)`.
    let mut mu = 1e-3;
    let mut nu = 2.0;
    let mut diag = DVector::<f64>::zeros(p.len());
    let scales: Vec<f64> = free.iter().map(|&i| problem.parameters[i].scale.abs()).collect();
    let mut iterations = 0;
    let mut converged = false;
    let mut message = String::from("iteration limit reached");

    while iterations < opts.max_iterations {
        let grad = scaled_gradient(&jac, &r);
        if chi2 <= opts.chi2_floor {
            converged = true;
            message = "χ² at exact-fit floor".into();
            break;
        }
        if grad <= opts.gradient_tol {
            converged = true;
            message = "scaled gradient below tolerance".into();
            break;
        }
        let jt = jac.transpose();
        let a = &jt * &jac;
        let g = &jt * &r;
        if let Some(step) = gauss_newton_resolved(&a, &g, &p, &scales, opts.resolution) {
            // Take the last (tiny) step if it still helps.
            let mut trial: Vec<f64> = p.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            ev.clamp(&mut trial);
            let r_new = ev.residual(&trial)?;
            if r_new.norm_squared() < chi2 {
                p = trial;
                chi2 = r_new.norm_squared();
                r = r_new;
                jac = ev.jacobian(&p, &r)?;
            }
            converged = true;
            message = "Gauss-Newton step below parameter resolution".into();
            break;
        }
        iterations += 1;
        for i in 0..p.len() {
            diag[i] = diag[i].max(a[(i, i)]).max(1e-300);
        }
        let mut accepted = false;
        let mut stalled = false;
        for _ in 0..60 {
            let mut damped = a.clone();
            for i in 0..p.len() {
                damped[(i, i)] += mu * diag[i];
            }
            let Some(chol) = damped.cholesky() else {
                mu *= nu;
                nu *= 2.0;
                continue;
            };
            let step = chol.solve(&(-&g));
            let mut trial: Vec<f64> = p.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            ev.clamp(&mut trial);
            let actual = DVector::from_iterator(p.len(), trial.iter().zip(&p).map(|(a, b)| a - b));
            let small = actual
                .iter()
                .zip(&p)
                .all(|(d, v)| d.abs() <= opts.step_tol * (v.abs() + opts.step_tol));
            if small {
                stalled = true;
                break;
            }
            let r_new = ev.residual(&trial)?;
            let chi2_new = r_new.norm_squared();
            let predicted = -2.0 * actual.dot(&g) - (&jac * &actual).norm_squared();
            let rho = if predicted > 0.0 { (chi2 - chi2_new) / predicted } else { -1.0 };
            if chi2_new < chi2 && rho > 0.0 {
                p = trial;
                r = r_new;
                chi2 = chi2_new;
                mu *= (1.0 / 3.0f64).max(1.0 - (2.0 * rho - 1.0).powi(3));
                nu = 2.0;
                accepted = true;
                break;
            }
            mu *= nu;
            nu *= 2.0;
        }
        if !accepted {
            let grad = scaled_gradient(&jac, &r);
            let unit = if opts.sigma_known {
                1.0
            } else {
                chi2 / n_data.saturating_sub(p.len()).max(1) as f64
            };
            let settled = predicted_decrease(&a, &g).is_some_and(|d| d <= opts.decrease_tol * unit);
            converged = grad <= opts.gradient_tol || chi2 <= opts.chi2_floor || settled;
            message = if grad <= opts.gradient_tol || chi2 <= opts.chi2_floor {
                "scaled gradient below tolerance".into()
            } else if settled {
                format!("remaining χ² decrease below rounding (scaled gradient {grad:.3e})")
            } else if stalled {
                format!("step size stalled with scaled gradient {grad:.3e}")
            } else {
                format!("damping exhausted with scaled gradient {grad:.3e}")
            };
            break;
        }
        jac = ev.jacobian(&p, &r)?;
    }

    let gradient = scaled_gradient(&jac, &r);
    finish(problem, &ev, p, r, jac, chi2, n_data, iterations, converged, gradient, message)
}

#[allow(clippy::too_many_arguments)]
fn finish(
    problem: &FitProblem,
    ev: &Evaluator,
    p: Vec<f64>,
    r: DVector<f64>,
    jac: DMatrix<f64>,
    chi2: f64,
    n_data: usize,
    iterations: usize,
    converged: bool,
    gradient: f64,
    message: String,
) -> Result<FitResult> {
    let opts = &problem.options;
    let n_free = p.len();
    let dof = n_data.saturating_sub(n_free);
    let reduced_chi2 = if dof > 0 { chi2 / dof as f64 } else { f64::NAN };

    // Column-normalized normal matrix: its conditioning measures parameter
    // degeneracy independently of units.
    let norms: Vec<f64> = (0..n_free).map(|c| jac.column(c).norm()).collect();
    let mut jn = jac.clone();
    for (c, &n) in norms.iter().enumerate() {
        if n > 0.0 {
            jn.column_mut(c).scale_mut(1.0 / n);
        }
    }
    let svd = jn.clone().svd(false, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let condition_number = if smin > 0.0 { (smax / smin).powi(2) } else { f64::INFINITY };
    let degenerate = !(condition_number <= opts.degeneracy_condition);
    let names: Vec<String> = ev.free.iter().map(|&i| problem.parameters[i].name.clone()).collect();
    let mut degenerate_parameters = Vec::new();
    if degenerate {
        let vt = svd.v_t.as_ref().expect("requested V^T");
        for (row, &s) in svd.singular_values.iter().enumerate() {
            if s == 0.0 || (smax / s).powi(2) > opts.degeneracy_condition {
                for c in 0..n_free {
                    if vt[(row, c)].abs() > 0.3 && !degenerate_parameters.contains(&names[c]) {
                        degenerate_parameters.push(names[c].clone());
                    }
                }
            }
        }
    }

    // Covariance (JᵀJ)⁻¹ via the pseudo-inverse of the normalized system.
    let cutoff = smax * 1e-13;
    let vt = svd.v_t.expect("requested V^T");
    let mut cov_n = DMatrix::<f64>::zeros(n_free, n_free);
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff {
            let v = vt.row(k).transpose();
            cov_n += (&v * v.transpose()) / (s * s);
        }
    }
    let scale = if opts.sigma_known || dof == 0 { 1.0 } else { reduced_chi2 };
    let mut covariance = vec![vec![0.0; n_free]; n_free];
    for i in 0..n_free {
        for j in 0..n_free {
            let (ni, nj) = (norms[i], norms[j]);
            covariance[i][j] = if ni > 0.0 && nj > 0.0 {
                cov_n[(i, j)] / (ni * nj) * scale
            } else if i == j {
                f64::INFINITY
            } else {
                0.0
            };
        }
    }
    let correlation: Vec<Vec<f64>> = (0..n_free)
        .map(|i| {
            (0..n_free)
                .map(|j| {
                    let d = (covariance[i][i] * covariance[j][j]).sqrt();
                    if d.is_finite() && d > 0.0 {
                        covariance[i][j] / d
                    } else if i == j {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();

    let all = ev.full(&p);
    let mut parameters = Vec::with_capacity(all.len());
    for (i, prm) in problem.parameters.iter().enumerate() {
        let uncertainty = match ev.free.iter().position(|&f| f == i) {
            Some(k) => covariance[k][k].max(0.0).sqrt(),
            None => 0.0,
        };
        parameters.push(FittedParameter {
            name: prm.name.clone(),
            value: all[i],
            uncertainty,
            fixed: prm.fixed,
        });
    }
    Ok(FitResult {
        parameters,
        free_names: names,
        covariance,
        correlation,
        chi2,
        reduced_chi2,
        dof,
        residuals: r.iter().copied().collect(),
        converged,
        iterations,
        gradient,
        condition_number,
        degenerate,
        degenerate_parameters,
        message,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_model_is_exact() {
        let xs: Vec<f64> = (0..20).map(|i| i as f64 * 0.5).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 2.5 * x).collect();
        let problem = FitProblem::new(vec![Parameter::new("a", 1.0)], |p: &[f64]| {
            xs.iter().zip(&ys).map(|(x, y)| p[0] * x - y).collect()
        });
        let fit = least_squares_solve(&problem).unwrap();
        assert!(fit.converged, "{}", fit.message);
        assert!((fit.value("a").unwrap() - 2.5).abs() < 1e-12, "{fit:?}");
        assert!(fit.chi2 < 1e-20);
    }

    #[test]
    fn rosenbrock_valley_converges() {
        let problem = FitProblem::new(
            vec![Parameter::new("x", -1.2).with_scale(1.0), Parameter::new("y", 1.0)],
            |p: &[f64]| vec![10.0 * (p[1] - p[0] * p[0]), 1.0 - p[0]],
        )
        .with_options(LsqOptions {
            chi2_floor: 1e-24,
            ..LsqOptions::default()
        });
        let fit = least_squares_solve(&problem).unwrap();
        assert!(fit.converged, "{}", fit.message);
        assert!((fit.value("x").unwrap() - 1.0).abs() < 1e-8);
        assert!((fit.value("y").unwrap() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn exponential_fit_reports_uncertainties() {
        // Deterministic pseudo-noise with known σ.
        let xs: Vec<f64> = (0..50).map(|i| i as f64 * 0.1).collect();
        let noise: Vec<f64> = (0..50).map(|i| 0.01 * ((i * 7919 % 101) as f64 / 50.5 - 1.0)).collect();
        let ys: Vec<f64> = xs.iter().zip(&noise).map(|(x, n)| 3.0 * (-0.7 * x).exp() + n).collect();
        let problem = FitProblem::new(
            vec![Parameter::new("a", 1.0).bounded(0.0, 10.0), Parameter::new("b", 0.1).bounded(0.0, 5.0)],
            |p: &[f64]| xs.iter().zip(&ys).map(|(x, y)| (p[0] * (-p[1] * x).exp() - y) / 0.01).collect(),
        );
        let fit = least_squares_solve(&problem).unwrap();
        assert!(fit.converged, "{}", fit.message);
        assert!((fit.value("a").unwrap() - 3.0).abs() < 5.0 * fit.uncertainty("a").unwrap());
        assert!(fit.uncertainty("b").unwrap() > 0.0);
        assert!(fit.correlation[0][1].abs() < 1.0);
        assert!(!fit.degenerate);
    }

    #[test]
    fn rounding_noise_in_the_model_still_converges() {
        let xs: Vec<f64> = (0..50).map(|i| i as f64 * 0.1).collect();
        let noise: Vec<f64> = (0..50).map(|i| 0.01 * ((i * 7919 % 101) as f64 / 50.5 - 1.0)).collect();
        let ys: Vec<f64> = xs.iter().zip(&noise).map(|(x, n)| 3.0 * (-0.7 * x).exp() + n).collect();
        let solve = |jitter: f64| {
            let problem = FitProblem::new(
                vec![Parameter::new("a", 1.0).bounded(0.0, 10.0), Parameter::new("b", 0.1).bounded(0.0, 5.0)],
                |p: &[f64]| {
                    xs.iter()
                        .zip(&ys)
                        .enumerate()
                        .map(|(i, (x, y))| {
                            // Parameter-dependent wobble, like a root finder's last digits.
                            let w = ((p[0] * 1e9 + p[1] * 3e9 + i as f64).sin() * 1e4).fract();
                            (p[0] * (-p[1] * x).exp() * (1.0 + jitter * w) - y) / 0.01
                        })
                        .collect()
                },
            );
            least_squares_solve(&problem).unwrap()
        };
        let clean = solve(0.0);
        let rough = solve(1e-9);
        assert!(rough.converged, "{}", rough.message);
        for name in ["a", "b"] {
            let d = (rough.value(name).unwrap() - clean.value(name).unwrap()).abs();
            assert!(d < 1e-3 * clean.uncertainty(name).unwrap(), "{name}: {d}");
        }
    }

    #[test]
    fn fixed_parameters_are_untouched() {
        let problem = FitProblem::new(
            vec![Parameter::new("a", 1.0), Parameter::new("b", 4.0).fixed(true)],
            |p: &[f64]| vec![p[0] - 2.0, p[1] - 7.0],
        );
        let fit = least_squares_solve(&problem).unwrap();
        assert_eq!(fit.value("b"), Some(4.0));
        assert_eq!(fit.uncertainty("b"), Some(0.0));
        assert!((fit.value("a").unwrap() - 2.0).abs() < 1e-10);
    }

    #[test]
    fn degenerate_parameters_are_flagged() {
        let xs: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let problem = FitProblem::new(
            vec![Parameter::new("a", 1.0), Parameter::new("b", 1.0)],
            |p: &[f64]| xs.iter().map(|x| (p[0] + p[1]) * x - 3.0 * x).collect(),
        );
        let fit = least_squares_solve(&problem).unwrap();
        assert!(fit.degenerate);
        assert_eq!(fit.degenerate_parameters.len(), 2);
    }

    #[test]
    fn nan_residual_reports_parameters() {
        let problem = FitProblem::new(vec![Parameter::new("a", -1.0)], |p: &[f64]| vec![p[0].sqrt()]);
        match least_squares_solve(&problem) {
            Err(Error::NonFiniteResidual { params }) => assert_eq!(params, vec![-1.0]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bounds_are_respected() {
        let problem = FitProblem::new(vec![Parameter::new("a", 0.5).bounded(0.0, 1.0)], |p: &[f64]| vec![p[0] - 3.0]);
        let fit = least_squares_solve(&problem).unwrap();
        assert!(fit.value("a").unwrap() <= 1.0);
        assert!((fit.value("a").unwrap() - 1.0).abs() < 1e-12);
    }
}
