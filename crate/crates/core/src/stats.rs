//! Ensemble noise statistics: atom-number binning, projection-noise scaling,
//! covariance estimation and decomposition, and lag-correlation curves.

use nalgebra::{DMatrix, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{domain, invalid, Error, Result};
use crate::estimation::EstimatePair;
use crate::lsq::{levenberg_marquardt, weighted_linear, LmOptions};

/// Shots sharing a similar total phase `φ_N`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShotBin {
    pub n_shots: usize,
    pub mean_phi_n: f64,
    pub var_delta: f64,
    pub var_delta_err: f64,
    pub var_upper: f64,
    pub var_upper_err: f64,
    pub var_lower: f64,
    pub var_lower_err: f64,
}

/// Sample variance and its jackknife standard error.
pub fn variance_with_jackknife(xs: &[f64]) -> Result<(f64, f64)> {
    let n = xs.len();
    if n < 3 {
        return Err(invalid("jackknife variance needs at least 3 values"));
    }
    let nf = n as f64;
    let mean = xs.iter().sum::<f64>() / nf;
    let ss: f64 = xs.iter().map(|x| (x - mean).powi(2)).sum();
    let var = ss / (nf - 1.0);
    // leave-one-out variances in closed form
    let loo: Vec<f64> = xs
        .iter()
        .map(|x| (ss - nf / (nf - 1.0) * (x - mean).powi(2)) / (nf - 2.0))
        .collect();
    let loo_mean = loo.iter().sum::<f64>() / nf;
    let jk = ((nf - 1.0) / nf * loo.iter().map(|v| (v - loo_mean).powi(2)).sum::<f64>()).sqrt();
    Ok((var, jk))
}

/// Sorts shots by `φ_N` and cuts them into contiguous bins of roughly
/// `target_bin_size` shots. Shots with identical `φ_N` never straddle a bin
/// edge, and bins that would hold fewer than three shots are merged into
/// their neighbour.
pub fn bin_shots(estimates: &[EstimatePair], target_bin_size: usize) -> Result<Vec<ShotBin>> {
    if target_bin_size < 3 {
        return Err(invalid("bins need at least 3 shots"));
    }
    if estimates.len() < target_bin_size {
        return Err(invalid(format!(
            "{} shots cannot fill one bin of {target_bin_size}",
            estimates.len()
        )));
    }
    if estimates.iter().any(|e| !e.phi_n.is_finite()) {
        return Err(invalid("non-finite phi_N"));
    }
    let mut sorted: Vec<&EstimatePair> = estimates.iter().collect();
    sorted.sort_by(|a, b| a.phi_n.total_cmp(&b.phi_n));
    let n = sorted.len();
    let k = n / target_bin_size;
    let mut edges = vec![0usize];
    for j in 1..k {
        let mut e = (j * n + k / 2) / k;
        while e < n && sorted[e].phi_n == sorted[e - 1].phi_n {
            e += 1;
        }
        if e > *edges.last().unwrap() && e < n {
            edges.push(e);
        }
    }
    edges.push(n);
    // merge undersized bins
    let mut merged = vec![0usize];
    for &e in &edges[1..] {
        if e - merged.last().unwrap() >= 3 || merged.len() == 1 {
            merged.push(e);
        } else {
            *merged.last_mut().unwrap() = e;
        }
    }
    if merged.len() > 2 && merged[merged.len() - 1] - merged[merged.len() - 2] < 3 {
        let last = merged.pop().unwrap();
        *merged.last_mut().unwrap() = last;
    }
    merged
        .windows(2)
        .map(|w| {
            let bin = &sorted[w[0]..w[1]];
            let col = |f: fn(&EstimatePair) -> f64| bin.iter().map(|e| f(e)).collect::<Vec<_>>();
            let (var_delta, var_delta_err) = variance_with_jackknife(&col(|e| e.phi_delta))?;
            let (var_upper, var_upper_err) = variance_with_jackknife(&col(|e| e.phi4))?;
            let (var_lower, var_lower_err) = variance_with_jackknife(&col(|e| e.phi3))?;
            Ok(ShotBin {
                n_shots: bin.len(),
                mean_phi_n: bin.iter().map(|e| e.phi_n).sum::<f64>() / bin.len() as f64,
                var_delta,
                var_delta_err,
                var_upper,
                var_upper_err,
                var_lower,
                var_lower_err,
            })
        })
        .collect()
}

/// `var(φ_Δ) ≈ intercept + slope·⟨φ_N⟩ + quad_coeff·⟨φ_N⟩²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    /// rad², the detection-noise floor
    pub intercept: f64,
    /// rad, the effective phase per atom
    pub slope: f64,
    pub quad_coeff: f64,
    pub intercept_se: f64,
    pub slope_se: f64,
    pub quad_coeff_se: f64,
    /// χ²/dof of the linear model
    pub reduced_chi_squared: f64,
    pub n_bins: usize,
}

/// Weighted regression of bin variances on `⟨φ_N⟩`.
///
/// Weights are the inverse Gaussian sampling variance of a variance,
/// `(n − 1)/(2 v²)`, with `v` taken from the current linear model and
/// refined iteratively; model-based weights avoid the downward bias that
/// weighting by each bin's own noisy variance would introduce. Intercept and
/// slope come from the linear model; the quadratic coefficient from a
/// separate quadratic model with the same weights.
pub fn scaling_fit(bins: &[ShotBin]) -> Result<ScalingFit> {
    scaling_fit_on(bins, |b| b.var_delta)
}

/// As [`scaling_fit`] for an arbitrary per-bin variance, e.g. `var(φ₄)`.
pub fn scaling_fit_on(bins: &[ShotBin], variance: impl Fn(&ShotBin) -> f64) -> Result<ScalingFit> {
    if bins.len() < 3 {
        return Err(invalid(format!("scaling fit needs ≥ 3 bins, got {}", bins.len())));
    }
    let y: Vec<f64> = bins.iter().map(&variance).collect();
    if y.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(invalid("bin variances must be positive"));
    }
    let x: Vec<f64> = bins.iter().map(|b| b.mean_phi_n).collect();
    let dof_w: Vec<f64> = bins.iter().map(|b| (b.n_shots as f64 - 1.0) / 2.0).collect();
    let linear = DMatrix::from_fn(bins.len(), 2, |i, j| x[i].powi(j as i32));
    let quadratic = DMatrix::from_fn(bins.len(), 3, |i, j| x[i].powi(j as i32));
    let mut pred = y.clone();
    let mut fit = None;
    for _ in 0..20 {
        let w: Vec<f64> = pred
            .iter()
            .zip(&y)
            .zip(&dof_w)
            .map(|((p, obs), d)| d / p.max(1e-3 * obs).powi(2))
            .collect();
        let f = weighted_linear(&linear, &y, &w)?;
        let next: Vec<f64> = x.iter().map(|xi| f.coefficients[0] + f.coefficients[1] * xi).collect();
        let change = next
            .iter()
            .zip(&pred)
            .map(|(a, b)| ((a - b) / b).abs())
            .fold(0.0, f64::max);
        pred = next;
        fit = Some((f, w));
        if change < 1e-10 {
            break;
        }
    }
    let (lin, w) = fit.expect("at least one iteration");
    let quad = weighted_linear(&quadratic, &y, &w)?;
    Ok(ScalingFit {
        intercept: lin.coefficients[0],
        slope: lin.coefficients[1],
        quad_coeff: quad.coefficients[2],
        intercept_se: lin.standard_error(0),
        slope_se: lin.standard_error(1),
        quad_coeff_se: quad.standard_error(2),
        reduced_chi_squared: lin.chi_squared / lin.dof.max(1) as f64,
        n_bins: bins.len(),
    })
}

/// `N_eff = φ_N / φ_eff,1`.
pub fn effective_atom_number(phi_n: f64, phi_eff1: f64) -> Result<f64> {
    if !(phi_eff1 > 0.0 && phi_eff1.is_finite()) {
        return Err(domain(format!("phase per atom must be positive, got {phi_eff1}")));
    }
    Ok(phi_n / phi_eff1)
}

/// Atomic noise above the detection floor in dB; `None` when the variance
/// does not exceed the floor.
pub fn noise_level_db(var_delta: f64, shot_noise: f64) -> Result<Option<f64>> {
    if !(shot_noise > 0.0 && shot_noise.is_finite()) {
        return Err(domain("shot-noise variance must be positive"));
    }
    if !var_delta.is_finite() {
        return Err(invalid("variance must be finite"));
    }
    if var_delta <= shot_noise {
        return Ok(None);
    }
    Ok(Some(10.0 * ((var_delta - shot_noise) / shot_noise).log10()))
}

/// Inverse of [`noise_level_db`].
pub fn variance_from_db(db: f64, shot_noise: f64) -> Result<f64> {
    if !(shot_noise > 0.0) || !db.is_finite() {
        return Err(domain("need a positive shot-noise variance and finite level"));
    }
    Ok(shot_noise * (1.0 + 10f64.powf(db / 10.0)))
}

/// Streaming unbiased sample covariance of equal-length series.
#[derive(Debug, Clone)]
pub struct CovarianceAccumulator {
    shift: Vec<f64>,
    sum: Vec<f64>,
    cross: DMatrix<f64>,
    count: usize,
}

impl CovarianceAccumulator {
    pub fn new(dim: usize) -> Self {
        Self { shift: Vec::new(), sum: vec![0.0; dim], cross: DMatrix::zeros(dim, dim), count: 0 }
    }

    pub fn dim(&self) -> usize {
        self.sum.len()
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn push(&mut self, series: &[f64]) -> Result<()> {
        let d = self.dim();
        if series.len() != d {
            return Err(invalid(format!("series of length {} for dimension {d}", series.len())));
        }
        if self.shift.is_empty() {
            // shifting by the first series keeps the sums well conditioned
            self.shift = series.to_vec();
        }
        let centred: Vec<f64> = series.iter().zip(&self.shift).map(|(x, s)| x - s).collect();
        for j in 0..d {
            self.sum[j] += centred[j];
            let cj = centred[j];
            if cj == 0.0 {
                continue;
            }
            for i in 0..=j {
                self.cross[(i, j)] += centred[i] * cj;
            }
        }
        self.count += 1;
        Ok(())
    }

    pub fn covariance(&self) -> Result<DMatrix<f64>> {
        if self.count < 2 {
            return Err(invalid("covariance needs at least 2 series"));
        }
        let n = self.count as f64;
        let d = self.dim();
        Ok(DMatrix::from_fn(d, d, |i, j| {
            let (a, b) = if i <= j { (i, j) } else { (j, i) };
            (self.cross[(a, b)] - self.sum[a] * self.sum[b] / n) / (n - 1.0)
        }))
    }
}

/// Unbiased sample covariance of a batch of series.
pub fn estimate_covariance(series: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    if series.len() < 2 {
        return Err(invalid("covariance needs at least 2 series"));
    }
    let d = series[0].len();
    if series.iter().any(|s| s.len() != d) {
        return Err(invalid("series lengths differ"));
    }
    let n = series.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| series.iter().map(|s| s[j]).sum::<f64>() / n).collect();
    let mut c = DMatrix::zeros(d, d);
    for s in series {
        for j in 0..d {
            let dj = s[j] - mean[j];
            for i in 0..=j {
                c[(i, j)] += (s[i] - mean[i]) * dj;
            }
        }
    }
    for j in 0..d {
        for i in 0..j {
            c[(j, i)] = c[(i, j)];
        }
    }
    Ok(c / (n - 1.0))
}

/// Covariance of one group of shots at a common operating point.
#[derive(Debug, Clone)]
pub struct CovarianceGroup {
    pub phi_n: f64,
    pub covariance: DMatrix<f64>,
    pub n_shots: usize,
}

/// Weights of the per-element regression of group covariances on `φ_N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegressionWeighting {
    Unweighted,
    ShotCount,
    /// Inverse Gaussian sampling variance of each element,
    /// `(n − 1)/(CᵢᵢCⱼⱼ + Cᵢⱼ²)`, taken from the group's own estimate.
    InverseVariance,
}

/// `C(φ_N) ≈ C₀ + φ_N C₁`.
#[derive(Debug, Clone)]
pub struct CovarianceDecomposition {
    pub c0: DMatrix<f64>,
    pub c1: DMatrix<f64>,
    /// mean diagonal of `C₀`, rad²
    pub shot_noise_level: f64,
    /// ‖C₂‖φ²/‖C(φ)‖ (Frobenius) at the largest `φ_N` for an element-wise
    /// quadratic fit; needs three distinct groups.
    pub residual_quadratic_norm: Option<f64>,
    /// Smallest eigenvalue of `C(φ_N)` at the ends of the fitted range
    /// relative to the largest; negative values flag a non-PSD
    /// reconstruction.
    pub min_relative_eigenvalue: f64,
}

impl CovarianceDecomposition {
    pub fn reconstruct(&self, phi_n: f64) -> DMatrix<f64> {
        &self.c0 + &self.c1 * phi_n
    }
}

/// Element-wise linear regression of group covariances on `φ_N`.
pub fn decompose_covariance(
    groups: &[CovarianceGroup],
    weighting: RegressionWeighting,
) -> Result<CovarianceDecomposition> {
    if groups.len() < 2 {
        return Err(invalid("decomposition needs at least two φ_N groups"));
    }
    let d = groups[0].covariance.nrows();
    if groups.iter().any(|g| g.covariance.shape() != (d, d)) {
        return Err(invalid("group covariances differ in shape"));
    }
    let xs: Vec<f64> = groups.iter().map(|g| g.phi_n).collect();
    let (lo, hi) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    if !(hi - lo > 1e-12 * hi.abs().max(1.0)) {
        return Err(invalid("degenerate φ_N spread across groups"));
    }
    let distinct = {
        let mut v = xs.clone();
        v.sort_by(f64::total_cmp);
        v.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * b.abs().max(1.0));
        v.len()
    };
    let weight = |g: &CovarianceGroup, i: usize, j: usize| -> f64 {
        match weighting {
            RegressionWeighting::Unweighted => 1.0,
            RegressionWeighting::ShotCount => g.n_shots as f64,
            RegressionWeighting::InverseVariance => {
                let c = &g.covariance;
                let v = c[(i, i)] * c[(j, j)] + c[(i, j)].powi(2);
                (g.n_shots as f64 - 1.0).max(1.0) / v.max(f64::MIN_POSITIVE)
            }
        }
    };

    let mut c0 = DMatrix::zeros(d, d);
    let mut c1 = DMatrix::zeros(d, d);
    let mut c2 = DMatrix::zeros(d, d);
    let mut w = vec![0.0; groups.len()];
    for i in 0..d {
        for j in i..d {
            for (wk, g) in w.iter_mut().zip(groups) {
                *wk = weight(g, i, j);
            }
            let sw: f64 = w.iter().sum();
            let x_bar = w.iter().zip(&xs).map(|(w, x)| w * x).sum::<f64>() / sw;
            let y_bar = w.iter().zip(groups).map(|(w, g)| w * g.covariance[(i, j)]).sum::<f64>() / sw;
            let (mut sxx, mut sxy) = (0.0, 0.0);
            for ((wk, x), g) in w.iter().zip(&xs).zip(groups) {
                sxx += wk * (x - x_bar).powi(2);
                sxy += wk * (x - x_bar) * (g.covariance[(i, j)] - y_bar);
            }
            if !(sxx > 0.0) {
                return Err(Error::Singular(format!("no φ_N leverage for element ({i}, {j})")));
            }
            let slope = sxy / sxx;
            c1[(i, j)] = slope;
            c0[(i, j)] = y_bar - slope * x_bar;
            if distinct >= 3 {
                let mut normal = Matrix3::zeros();
                let mut rhs = Vector3::zeros();
                for ((wk, x), g) in w.iter().zip(&xs).zip(groups) {
                    let v = Vector3::new(1.0, *x, x * x);
                    normal += v * v.transpose() * *wk;
                    rhs += v * (*wk * g.covariance[(i, j)]);
                }
                let sol = normal
                    .try_inverse()
                    .ok_or_else(|| Error::Singular("quadratic regression design".into()))?
                    * rhs;
                c2[(i, j)] = sol[2];
            }
            c0[(j, i)] = c0[(i, j)];
            c1[(j, i)] = c1[(i, j)];
            c2[(j, i)] = c2[(i, j)];
        }
    }
    let shot_noise_level = c0.diagonal().mean();
    let residual_quadratic_norm = (distinct >= 3).then(|| {
        let reference = &c0 + &c1 * hi;
        c2.norm() * hi * hi / reference.norm()
    });

    let min_relative_eigenvalue = [lo, hi]
        .iter()
        .map(|&x| {
            let e = symmetrize(&c0 + &c1 * x).symmetric_eigenvalues();
            let max = e.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
            e.min() / max.max(f64::MIN_POSITIVE)
        })
        .fold(f64::INFINITY, f64::min);

    Ok(CovarianceDecomposition {
        c0,
        c1,
        shot_noise_level,
        residual_quadratic_norm,
        min_relative_eigenvalue,
    })
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// `A e^{−t/τ} cos(2πt/T + θ) + B`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DampedCosine {
    pub amplitude: f64,
    /// s
    pub damping_time: f64,
    /// s
    pub period: f64,
    pub phase: f64,
    pub offset: f64,
    pub rms_residual: f64,
}

impl DampedCosine {
    pub fn eval(&self, t: f64) -> f64 {
        self.amplitude
            * (-t / self.damping_time).exp()
            * (2.0 * std::f64::consts::PI * t / self.period + self.phase).cos()
            + self.offset
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationCurve {
    /// s
    pub lag: Vec<f64>,
    pub rho: Vec<f64>,
    pub oscillation: Option<DampedCosine>,
}

/// Normalises `c1` by `√(dᵢdⱼ)` with `d = diag_model` and averages each
/// minor diagonal. A damped cosine is fitted to the leading two thirds of
/// the lags when there are enough of them.
pub fn correlation_curve(
    c1: &DMatrix<f64>,
    diag_model: &[f64],
    sample_period: f64,
) -> Result<CorrelationCurve> {
    let n = c1.nrows();
    if c1.ncols() != n || n == 0 {
        return Err(invalid("correlation input must be a non-empty square matrix"));
    }
    if diag_model.len() != n {
        return Err(invalid("diagonal model length differs from matrix size"));
    }
    if diag_model.iter().any(|d| !(*d > 0.0) || !d.is_finite()) {
        return Err(domain("diagonal model must be positive"));
    }
    if !(sample_period > 0.0) {
        return Err(invalid("sample period must be positive"));
    }
    let scale: Vec<f64> = diag_model.iter().map(|d| d.sqrt()).collect();
    let rho: Vec<f64> = (0..n)
        .map(|k| {
            (0..n - k).map(|i| c1[(i, i + k)] / (scale[i] * scale[i + k])).sum::<f64>()
                / (n - k) as f64
        })
        .collect();
    let lag: Vec<f64> = (0..n).map(|k| k as f64 * sample_period).collect();
    let window = (2 * n) / 3;
    let oscillation = if window >= 12 {
        fit_damped_cosine(&rho[..window], sample_period).ok()
    } else {
        None
    };
    Ok(CorrelationCurve { lag, rho, oscillation })
}

/// Least-squares damped cosine through `values` sampled every
/// `sample_period`, started from a grid of trial periods.
pub fn fit_damped_cosine(values: &[f64], sample_period: f64) -> Result<DampedCosine> {
    let n = values.len();
    if n < 8 {
        return Err(invalid("too few points for an oscillation fit"));
    }
    let tail = &values[n / 2..];
    let offset0 = tail.iter().sum::<f64>() / tail.len() as f64;
    let amp0 = values[0] - offset0;
    // parameters: A, ln τ, ln T, θ, B with time in samples
    let model = |p: &[f64], k: f64| {
        p[0] * (-k / p[1].exp()).exp() * (std::f64::consts::TAU * k / p[2].exp() + p[3]).cos() + p[4]
    };
    let mut best: Option<(f64, Vec<f64>)> = None;
    for g in 0..12 {
        let period0 = 4.0 * (2.0 * n as f64 / 4.0).powf(g as f64 / 11.0);
        let start = [amp0, (n as f64 / 3.0).ln(), period0.ln(), 0.0, offset0];
        let fit = levenberg_marquardt(
            |p, out| {
                for (k, o) in out.iter_mut().enumerate() {
                    *o = model(p, k as f64) - values[k];
                }
            },
            &start,
            n,
            LmOptions { max_iterations: 300, tolerance: 1e-14 },
        );
        if let Ok(f) = fit {
            if best.as_ref().is_none_or(|(rss, _)| f.rss < *rss) {
                best = Some((f.rss, f.parameters));
            }
        }
    }
    let (rss, mut p) = best.ok_or_else(|| Error::Numeric("oscillation fit failed".into()))?;
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("oscillation fit diverged".into()));
    }
    // fold the frequency into the Nyquist band; integer sample times cannot
    // tell the aliases apart
    let mut freq = 1.0 / p[2].exp();
    freq -= freq.round();
    if freq < 0.0 {
        freq = -freq;
        p[3] = -p[3];
    }
    if !(freq > 0.0) {
        return Err(Error::Numeric("fitted oscillation has zero frequency".into()));
    }
    p[2] = (1.0 / freq).ln();
    // canonical form: positive amplitude, phase in (−π, π]
    if p[0] < 0.0 {
        p[0] = -p[0];
        p[3] += std::f64::consts::PI;
    }
    p[3] = (p[3] + std::f64::consts::PI).rem_euclid(std::f64::consts::TAU) - std::f64::consts::PI;
    Ok(DampedCosine {
        amplitude: p[0],
        damping_time: p[1].exp() * sample_period,
        period: p[2].exp() * sample_period,
        phase: p[3],
        offset: p[4],
        rms_residual: (rss / n as f64).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(phi4: f64, phi3: f64) -> EstimatePair {
        EstimatePair {
            phi4,
            phi3,
            phi_n: phi4 + phi3,
            phi_delta: phi4 - phi3,
            fit_residual_rms: 0.0,
            gram_condition: 1.0,
            ill_conditioned: false,
        }
    }

    #[test]
    fn jackknife_of_variance_matches_brute_force() {
        let xs: Vec<f64> = (0..23).map(|i| ((i * 7919) % 31) as f64 * 0.1).collect();
        let (var, se) = variance_with_jackknife(&xs).unwrap();
        let n = xs.len();
        let sample_var = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)
        };
        assert!((var - sample_var(&xs)).abs() < 1e-12);
        let loo: Vec<f64> = (0..n)
            .map(|i| {
                let v: Vec<f64> =
                    xs.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, x)| *x).collect();
                sample_var(&v)
            })
            .collect();
        let m = loo.iter().sum::<f64>() / n as f64;
        let brute = ((n as f64 - 1.0) / n as f64 * loo.iter().map(|v| (v - m).powi(2)).sum::<f64>())
            .sqrt();
        assert!((se - brute).abs() < 1e-12 * brute);
    }

    #[test]
    fn binning_partitions_exactly() {
        let est: Vec<EstimatePair> =
            (0..1000).map(|i| pair(i as f64 * 1e-3, ((i * 13) % 7) as f64 * 1e-7)).collect();
        let bins = bin_shots(&est, 200).unwrap();
        assert_eq!(bins.len(), 5);
        assert!(bins.iter().all(|b| b.n_shots == 200));
        assert!(bins.windows(2).all(|w| w[0].mean_phi_n < w[1].mean_phi_n));
    }

    #[test]
    fn identical_phi_n_stays_in_one_bin() {
        let est: Vec<EstimatePair> =
            (0..600).map(|i| pair(0.5 + (i % 5) as f64 * 1e-3, 0.5 - (i % 5) as f64 * 1e-3)).collect();
        let bins = bin_shots(&est, 200).unwrap();
        assert_eq!(bins.len(), 1);
        let deltas: Vec<f64> = est.iter().map(|e| e.phi_delta).collect();
        let (v, _) = variance_with_jackknife(&deltas).unwrap();
        assert!((bins[0].var_delta - v).abs() < 1e-15);
    }

    #[test]
    fn too_few_shots_is_an_error() {
        let est: Vec<EstimatePair> = (0..100).map(|i| pair(i as f64, 0.0)).collect();
        assert!(bin_shots(&est, 200).is_err());
    }

    #[test]
    fn scaling_fit_on_exact_linear_data() {
        let bins: Vec<ShotBin> = (0..6)
            .map(|i| {
                let x = 0.2 * i as f64;
                ShotBin {
                    n_shots: 200,
                    mean_phi_n: x,
                    var_delta: 1e-4 + 2e-3 * x,
                    var_delta_err: 0.0,
                    var_upper: 1.0,
                    var_upper_err: 0.0,
                    var_lower: 1.0,
                    var_lower_err: 0.0,
                }
            })
            .collect();
        let f = scaling_fit(&bins).unwrap();
        assert!((f.intercept - 1e-4).abs() < 1e-15);
        assert!((f.slope - 2e-3).abs() < 1e-14);
        assert!(f.quad_coeff.abs() < 1e-12);
        assert!(scaling_fit(&bins[..2]).is_err());
        let mut bad = bins.clone();
        bad[1].var_delta = 0.0;
        assert!(scaling_fit(&bad).is_err());
    }

    #[test]
    fn effective_atom_number_examples() {
        assert!((effective_atom_number(1.5, 2e-3).unwrap() - 750.0).abs() < 1e-9);
        assert_eq!(effective_atom_number(0.0, 2e-3).unwrap(), 0.0);
        assert!(effective_atom_number(1.0, 0.0).is_err());
    }

    #[test]
    fn decibel_examples() {
        assert!(noise_level_db(2.0, 1.0).unwrap().unwrap().abs() < 1e-12);
        assert!((noise_level_db(10001.0, 1.0).unwrap().unwrap() - 40.0).abs() < 1e-12);
        assert_eq!(noise_level_db(0.5, 1.0).unwrap(), None);
        assert_eq!(noise_level_db(1.0, 1.0).unwrap(), None);
        assert!(noise_level_db(1.0, 0.0).is_err());
        let db = noise_level_db(3.7e-3, 3e-7).unwrap().unwrap();
        assert!((variance_from_db(db, 3e-7).unwrap() / 3.7e-3 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn accumulator_matches_batch_estimate() {
        let series: Vec<Vec<f64>> = (0..50)
            .map(|s| (0..6).map(|i| 1e3 + ((s * 31 + i * 17) % 13) as f64 * 0.01).collect())
            .collect();
        let batch = estimate_covariance(&series).unwrap();
        let mut acc = CovarianceAccumulator::new(6);
        for s in &series {
            acc.push(s).unwrap();
        }
        let streamed = acc.covariance().unwrap();
        assert!((&batch - &streamed).norm() < 1e-12 * batch.norm());
        assert!(acc.push(&[1.0]).is_err());
    }

    #[test]
    fn covariance_input_checks() {
        assert!(estimate_covariance(&[vec![1.0, 2.0]]).is_err());
        assert!(estimate_covariance(&[vec![1.0, 2.0], vec![1.0]]).is_err());
    }

    #[test]
    fn exactly_linear_groups_are_recovered() {
        let c0 = DMatrix::from_row_slice(2, 2, &[2.0, 0.1, 0.1, 1.5]);
        let c1 = DMatrix::from_row_slice(2, 2, &[0.5, 0.3, 0.3, 0.4]);
        let groups: Vec<CovarianceGroup> = [0.2, 0.9]
            .iter()
            .map(|&x| CovarianceGroup { phi_n: x, covariance: &c0 + &c1 * x, n_shots: 10 })
            .collect();
        let d = decompose_covariance(&groups, RegressionWeighting::Unweighted).unwrap();
        assert!((&d.c0 - &c0).norm() < 1e-14);
        assert!((&d.c1 - &c1).norm() < 1e-14);
        assert_eq!(d.residual_quadratic_norm, None);
        assert!((d.shot_noise_level - 1.75).abs() < 1e-14);
        assert!(d.min_relative_eigenvalue > 0.0);
    }

    #[test]
    fn single_or_coincident_groups_are_rejected() {
        let c = DMatrix::identity(3, 3);
        let g = CovarianceGroup { phi_n: 0.0, covariance: c.clone(), n_shots: 100 };
        assert!(decompose_covariance(&[g.clone()], RegressionWeighting::Unweighted).is_err());
        assert!(decompose_covariance(&[g.clone(), g], RegressionWeighting::ShotCount).is_err());
    }

    #[test]
    fn diagonal_c1_gives_delta_correlation() {
        let c1 = DMatrix::from_diagonal(&nalgebra::DVector::from_fn(30, |i, _| 1.0 + i as f64));
        let diag: Vec<f64> = c1.diagonal().iter().copied().collect();
        let curve = correlation_curve(&c1, &diag, 0.5e-6).unwrap();
        assert_eq!(curve.rho[0], 1.0);
        assert!(curve.rho[1..].iter().all(|&r| r == 0.0));
        assert!(correlation_curve(&c1, &vec![0.0; 30], 0.5e-6).is_err());
    }

    #[test]
    fn damped_cosine_is_recovered() {
        let truth = DampedCosine {
            amplitude: 0.6,
            damping_time: 4e-6,
            period: 11e-6,
            phase: 0.0,
            offset: 0.4,
            rms_residual: 0.0,
        };
        let values: Vec<f64> = (0..80).map(|k| truth.eval(k as f64 * 0.5e-6)).collect();
        let fit = fit_damped_cosine(&values, 0.5e-6).unwrap();
        assert!((fit.period / 11e-6 - 1.0).abs() < 1e-6, "{fit:?}");
        assert!((fit.damping_time / 4e-6 - 1.0).abs() < 1e-6);
        assert!((fit.offset - 0.4).abs() < 1e-6);
    }
}
