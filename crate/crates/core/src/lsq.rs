//! Small dense least-squares solvers: weighted linear regression and a
//! Levenberg–Marquardt driver with a finite-difference Jacobian.

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone)]
pub struct LinearFit {
    pub coefficients: DVector<f64>,
    /// `(XᵀWX)⁻¹`; the coefficient covariance when the weights are inverse
    /// variances.
    pub covariance: DMatrix<f64>,
    pub chi_squared: f64,
    pub dof: usize,
}

impl LinearFit {
    pub fn standard_error(&self, k: usize) -> f64 {
        self.covariance[(k, k)].max(0.0).sqrt()
    }
}

/// Minimises `Σ wᵢ (yᵢ − (Xβ)ᵢ)²`.
pub fn weighted_linear(design: &DMatrix<f64>, y: &[f64], weights: &[f64]) -> Result<LinearFit> {
    let (n, p) = design.shape();
    if y.len() != n || weights.len() != n {
        return Err(invalid("design, response and weights differ in length"));
    }
    if n < p {
        return Err(Error::Singular(format!("{n} observations for {p} coefficients")));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(invalid("weights must be finite and non-negative"));
    }
    let mut xtwx = DMatrix::<f64>::zeros(p, p);
    let mut xtwy = DVector::<f64>::zeros(p);
    for i in 0..n {
        let w = weights[i];
        for a in 0..p {
            let xa = design[(i, a)] * w;
            xtwy[a] += xa * y[i];
            for b in 0..p {
                xtwx[(a, b)] += xa * design[(i, b)];
            }
        }
    }
    // equilibrate columns so the singularity test is independent of units
    let scale: Vec<f64> = (0..p).map(|a| xtwx[(a, a)].sqrt()).collect();
    if scale.iter().any(|d| !(*d > 0.0) || !d.is_finite()) {
        return Err(Error::Singular("design column without weight".into()));
    }
    let scaled = DMatrix::from_fn(p, p, |a, b| xtwx[(a, b)] / (scale[a] * scale[b]));
    let inv = invert_spd(&scaled)?;
    let covariance = DMatrix::from_fn(p, p, |a, b| inv[(a, b)] / (scale[a] * scale[b]));
    let coefficients = &covariance * &xtwy;
    let fitted = design * &coefficients;
    let chi_squared = (0..n).map(|i| weights[i] * (y[i] - fitted[i]).powi(2)).sum();
    Ok(LinearFit { coefficients, covariance, chi_squared, dof: n - p })
}

/// Inverse of a symmetric positive-definite matrix, failing on (near)
/// singularity.
pub fn invert_spd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = m.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let min = eig.eigenvalues.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    if !(max > 0.0) || min <= max * 1e-14 {
        return Err(Error::Singular(format!(
            "normal matrix not positive definite (eigenvalues {min:e}..{max:e})"
        )));
    }
    m.clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Singular("Cholesky factorisation failed".into()))
}

#[derive(Debug, Clone, Copy)]
pub struct LmOptions {
    pub max_iterations: usize,
    /// Relative decrease of the residual sum of squares regarded as converged.
    pub tolerance: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self { max_iterations: 200, tolerance: 1e-12 }
    }
}

#[derive(Debug, Clone)]
pub struct LmFit {
    pub parameters: Vec<f64>,
    /// `s²(JᵀJ)⁻¹` with `s² = rss/dof`.
    pub covariance: DMatrix<f64>,
    pub rss: f64,
    pub dof: usize,
    pub iterations: usize,
}

impl LmFit {
    pub fn standard_error(&self, k: usize) -> f64 {
        self.covariance[(k, k)].max(0.0).sqrt()
    }
}

/// Levenberg–Marquardt minimisation of `Σ rᵢ(p)²`.
///
/// `residuals(p, out)` fills `out` (length `n_residuals`). Parameters should
/// be scaled to order unity; the Jacobian uses central differences.
pub fn levenberg_marquardt<F>(
    residuals: F,
    initial: &[f64],
    n_residuals: usize,
    options: LmOptions,
) -> Result<LmFit>
where
    F: Fn(&[f64], &mut [f64]),
{
    let p = initial.len();
    if n_residuals <= p {
        return Err(invalid(format!("{n_residuals} residuals for {p} parameters")));
    }
    let mut params = initial.to_vec();
    let mut r = vec![0.0; n_residuals];
    residuals(&params, &mut r);
    let mut rss = sum_sq(&r);
    if !rss.is_finite() {
        return Err(Error::Numeric("non-finite residuals at the initial guess".into()));
    }
    let mut lambda = 1e-3;
    let mut trial = vec![0.0; p];
    let mut r_trial = vec![0.0; n_residuals];
    let mut iterations = 0;
    let mut jac = jacobian(&residuals, &params, n_residuals);
    while iterations < options.max_iterations {
        iterations += 1;
        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * DVector::from_column_slice(&r);
        let mut improved = false;
        let mut converged = false;
        for _ in 0..30 {
            let mut a = jtj.clone();
            for k in 0..p {
                a[(k, k)] += lambda * jtj[(k, k)].max(1e-12);
            }
            let Some(step) = a.cholesky().map(|c| c.solve(&(-&jtr))) else {
                lambda *= 10.0;
                continue;
            };
            for k in 0..p {
                trial[k] = params[k] + step[k];
            }
            residuals(&trial, &mut r_trial);
            let rss_trial = sum_sq(&r_trial);
            if rss_trial.is_finite() && rss_trial <= rss {
                let decrease = rss - rss_trial;
                params.copy_from_slice(&trial);
                std::mem::swap(&mut r, &mut r_trial);
                rss = rss_trial;
                lambda = (lambda * 0.3).max(1e-12);
                improved = true;
                converged = decrease <= options.tolerance * rss.max(f64::MIN_POSITIVE);
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
        jac = jacobian(&residuals, &params, n_residuals);
        if converged {
            break;
        }
    }
    let dof = n_residuals - p;
    let jtj = jac.transpose() * &jac;
    let covariance = match jtj.clone().try_inverse() {
        Some(inv) => inv * (rss / dof as f64),
        None => DMatrix::from_element(p, p, f64::NAN),
    };
    Ok(LmFit { parameters: params, covariance, rss, dof, iterations })
}

fn jacobian<F>(residuals: &F, params: &[f64], n: usize) -> DMatrix<f64>
where
    F: Fn(&[f64], &mut [f64]),
{
    let p = params.len();
    let mut jac = DMatrix::zeros(n, p);
    let mut shifted = params.to_vec();
    let mut plus = vec![0.0; n];
    let mut minus = vec![0.0; n];
    for k in 0..p {
        let h = 1e-6 * params[k].abs().max(1e-3);
        shifted[k] = params[k] + h;
        residuals(&shifted, &mut plus);
        shifted[k] = params[k] - h;
        residuals(&shifted, &mut minus);
        shifted[k] = params[k];
        for i in 0..n {
            jac[(i, k)] = (plus[i] - minus[i]) / (2.0 * h);
        }
    }
    jac
}

fn sum_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weighted_line_is_exact_on_exact_data() {
        let xs = [0.0, 1.0, 2.0, 3.0];
        let design = DMatrix::from_fn(4, 2, |i, j| if j == 0 { 1.0 } else { xs[i] });
        let y: Vec<f64> = xs.iter().map(|x| 2.0 - 0.5 * x).collect();
        let fit = weighted_linear(&design, &y, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((fit.coefficients[0] - 2.0).abs() < 1e-12);
        assert!((fit.coefficients[1] + 0.5).abs() < 1e-12);
        assert!(fit.chi_squared < 1e-20);
    }

    #[test]
    fn collinear_design_is_singular() {
        let design = DMatrix::from_fn(3, 2, |i, _| i as f64);
        let err = weighted_linear(&design, &[1.0, 2.0, 3.0], &[1.0; 3]).unwrap_err();
        assert!(matches!(err, Error::Singular(_)));
    }

    #[test]
    fn lm_recovers_exponential_decay() {
        let ts: Vec<f64> = (0..40).map(|i| i as f64 * 0.25).collect();
        let ys: Vec<f64> = ts.iter().map(|t| 3.0 * (-t / 2.5).exp() + 0.2).collect();
        let fit = levenberg_marquardt(
            |p, out| {
                for (i, t) in ts.iter().enumerate() {
                    out[i] = p[0] * (-t / p[1]).exp() + p[2] - ys[i];
                }
            },
            &[1.0, 1.0, 0.0],
            ts.len(),
            LmOptions::default(),
        )
        .unwrap();
        assert!((fit.parameters[0] - 3.0).abs() < 1e-6);
        assert!((fit.parameters[1] - 2.5).abs() < 1e-6);
        assert!((fit.parameters[2] - 0.2).abs() < 1e-6);
    }
}
