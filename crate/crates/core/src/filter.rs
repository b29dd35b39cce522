//! Matched filtering and the conditional-variance squeezing criterion.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{domain, invalid, Error, Result};
use crate::probe::{PumpingModel, RamseyParams};

/// Expected signal `φ_N m̂(t) η(t)` on a sample grid, rad.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalModel {
    pub samples: Vec<f64>,
}

pub fn build_signal(
    phi_n: f64,
    m: &PumpingModel,
    eta: &RamseyParams,
    times: &[f64],
) -> Result<SignalModel> {
    eta.validate()?;
    if times.is_empty() {
        return Err(invalid("empty sample grid"));
    }
    if times.iter().any(|t| !(*t >= 0.0) || !t.is_finite())
        || times.windows(2).any(|w| w[1] <= w[0])
    {
        return Err(invalid("sample grid must be non-negative and strictly increasing"));
    }
    if !phi_n.is_finite() {
        return Err(invalid("phi_N must be finite"));
    }
    Ok(SignalModel { samples: times.iter().map(|&t| phi_n * m.eval(t) * eta.eval(t)).collect() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterOptions {
    /// Condition number above which a diagonal shift is added.
    pub condition_limit: f64,
    /// Initial shift as a fraction of the mean diagonal; raised tenfold
    /// until the shifted matrix satisfies `condition_limit`.
    pub tikhonov_epsilon: f64,
}

impl Default for FilterOptions {
    fn default() -> Self {
        Self { condition_limit: 1e8, tikhonov_epsilon: 1e-10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterResult {
    /// Unit-norm temporal weights.
    pub q_opt: Vec<f64>,
    pub snr: f64,
    /// Condition number of the matrix actually inverted.
    pub condition_used: f64,
    /// Diagonal shift added before inversion, rad².
    pub regularization: f64,
}

fn check_covariance(c: &DMatrix<f64>, dim: usize) -> Result<DVector<f64>> {
    if c.shape() != (dim, dim) {
        return Err(invalid(format!("covariance is {:?}, signal has {dim} samples", c.shape())));
    }
    if c.iter().any(|x| !x.is_finite()) {
        return Err(invalid("covariance has non-finite entries"));
    }
    let asym = (c - c.transpose()).norm();
    if asym > 1e-10 * c.norm() {
        return Err(invalid("covariance is not symmetric"));
    }
    let eig = c.clone().symmetric_eigenvalues();
    let max = eig.max();
    if !(max > 0.0) || eig.min() < -1e-10 * max {
        return Err(invalid("covariance is not positive semi-definite"));
    }
    Ok(eig)
}

fn condition(eig: &DVector<f64>, shift: f64) -> f64 {
    let lo = eig.min() + shift;
    if lo > 0.0 { (eig.max() + shift) / lo } else { f64::INFINITY }
}

/// Solves `(C + shift·I) q = s` and normalises `q` to unit length.
pub fn regularized_mode(c: &DMatrix<f64>, s: &SignalModel, shift: f64) -> Result<Vec<f64>> {
    let n = s.samples.len();
    check_covariance(c, n)?;
    let a = c + DMatrix::identity(n, n) * shift;
    let chol = a
        .cholesky()
        .ok_or_else(|| Error::Singular("covariance is not positive definite".into()))?;
    let q = chol.solve(&DVector::from_column_slice(&s.samples));
    let norm = q.norm();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::Numeric("matched filter has zero or non-finite norm".into()));
    }
    Ok((q / norm).iter().copied().collect())
}

/// `q_opt ∝ C⁻¹s`, the mode maximising [`snr`].
pub fn optimal_mode(c: &DMatrix<f64>, s: &SignalModel) -> Result<FilterResult> {
    optimal_mode_with(c, s, &FilterOptions::default())
}

pub fn optimal_mode_with(
    c: &DMatrix<f64>,
    s: &SignalModel,
    options: &FilterOptions,
) -> Result<FilterResult> {
    let n = s.samples.len();
    if s.samples.iter().any(|x| !x.is_finite()) {
        return Err(invalid("signal has non-finite samples"));
    }
    if s.samples.iter().all(|&x| x == 0.0) {
        return Err(invalid("signal is identically zero"));
    }
    let eig = check_covariance(c, n)?;
    let mut shift = 0.0;
    if condition(&eig, 0.0) > options.condition_limit {
        let mean_diag = c.trace() / n as f64;
        let mut eps = options.tikhonov_epsilon;
        shift = eps * mean_diag;
        while condition(&eig, shift) > options.condition_limit {
            eps *= 10.0;
            shift = eps * mean_diag;
        }
    }
    let q_opt = regularized_mode(c, s, shift)?;
    let snr = snr(&q_opt, s, c)?;
    Ok(FilterResult { q_opt, snr, condition_used: condition(&eig, shift), regularization: shift })
}

/// `(qᵀs)² / (qᵀCq)`.
pub fn snr(q: &[f64], s: &SignalModel, c: &DMatrix<f64>) -> Result<f64> {
    let n = s.samples.len();
    if q.len() != n || c.shape() != (n, n) {
        return Err(invalid("mode, signal and covariance dimensions differ"));
    }
    let q = DVector::from_column_slice(q);
    let num = q.dot(&DVector::from_column_slice(&s.samples)).powi(2);
    let den = q.dot(&(c * &q));
    if !(den > 0.0) {
        return Err(domain(format!("noise power qᵀCq = {den:e} is not positive")));
    }
    Ok(num / den)
}

/// Optimal linear conditioning of a final measurement on a prior one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionalVariance {
    /// `var(final − a·pre)`
    pub variance: f64,
    /// `a = cov(final, pre)/var(pre)`
    pub coefficient: f64,
    pub correlation: f64,
    pub var_final: f64,
    pub var_pre: f64,
    pub n_pairs: usize,
}

pub const MIN_PAIRS: usize = 100;

pub fn conditional_variance(pre: &[f64], fin: &[f64]) -> Result<ConditionalVariance> {
    if pre.len() != fin.len() {
        return Err(invalid("pre and final lists differ in length"));
    }
    if pre.len() < MIN_PAIRS {
        return Err(invalid(format!("need at least {MIN_PAIRS} pairs, got {}", pre.len())));
    }
    if pre.iter().chain(fin).any(|x| !x.is_finite()) {
        return Err(invalid("non-finite estimate"));
    }
    let n = pre.len() as f64;
    let mp = pre.iter().sum::<f64>() / n;
    let mf = fin.iter().sum::<f64>() / n;
    let (mut vp, mut vf, mut cv) = (0.0, 0.0, 0.0);
    for (p, f) in pre.iter().zip(fin) {
        vp += (p - mp) * (p - mp);
        vf += (f - mf) * (f - mf);
        cv += (p - mp) * (f - mf);
    }
    let (vp, vf, cv) = (vp / (n - 1.0), vf / (n - 1.0), cv / (n - 1.0));
    if !(vp > 0.0) {
        return Err(domain("pre-measurement variance is zero"));
    }
    let a = cv / vp;
    let residual: Vec<f64> = pre.iter().zip(fin).map(|(p, f)| f - a * p).collect();
    let mr = residual.iter().sum::<f64>() / n;
    let variance = residual.iter().map(|r| (r - mr).powi(2)).sum::<f64>() / (n - 1.0);
    let correlation = if vf > 0.0 { cv / (vp * vf).sqrt() } else { 0.0 };
    Ok(ConditionalVariance {
        variance: variance.max(0.0),
        coefficient: a,
        correlation,
        var_final: vf,
        var_pre: vp,
        n_pairs: pre.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SqueezingVerdict {
    pub conditional_variance: f64,
    pub css_variance: f64,
    pub contrast: f64,
    pub xi_squared: f64,
    pub improves: bool,
}

/// `ξ² = (var_cond/var_css)/η²`; squeezing is certified when `ξ² < 1`.
pub fn wineland_check(var_cond: f64, var_css: f64, eta: f64) -> Result<SqueezingVerdict> {
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(domain(format!("contrast must lie in (0, 1], got {eta}")));
    }
    if !(var_css > 0.0 && var_css.is_finite()) {
        return Err(domain("reference variance must be positive"));
    }
    if !(var_cond >= 0.0 && var_cond.is_finite()) {
        return Err(domain("conditional variance must be non-negative"));
    }
    let xi_squared = var_cond / var_css / (eta * eta);
    Ok(SqueezingVerdict {
        conditional_variance: var_cond,
        css_variance: var_css,
        contrast: eta,
        xi_squared,
        improves: xi_squared < 1.0,
    })
}
