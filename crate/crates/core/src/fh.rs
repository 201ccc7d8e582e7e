//! Area-level Fay–Herriot model on log-scale domain estimates.
//!
//! `log t̂_m = z_m'β + u_m + e_m` with `u_m ~ N(0, σ_u²)` and known sampling
//! variances `ψ_m`. The variance component is estimated by REML (Fisher
//! scoring) or by the Fay–Herriot moment equation; β by GLS.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng;

const REML_MAX_ITER: usize = 100;
const REML_TOL: f64 = 1e-8;
/// Share of failed bootstrap refits above which an MSE is flagged.
pub const FAILURE_FLAG_SHARE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct FhInput {
    pub domains: Vec<String>,
    /// Log-scale direct or MC estimates.
    pub y: Vec<f64>,
    /// Log-scale sampling variances, strictly positive.
    pub psi: Vec<f64>,
    /// Covariate rows including the intercept column.
    pub z: Vec<Vec<f64>>,
}

impl FhInput {
    /// Build an input, prepending an intercept to each covariate row.
    pub fn with_intercept(domains: Vec<String>, y: Vec<f64>, psi: Vec<f64>, z: Vec<Vec<f64>>) -> Self {
        let z = z.into_iter().map(|r| std::iter::once(1.0).chain(r).collect()).collect();
        Self { domains, y, psi, z }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn ncols(&self) -> usize {
        self.z.first().map_or(0, Vec::len)
    }

    fn validate(&self, min_extra: usize) -> Result<()> {
        let m = self.len();
        if m == 0 {
            return Err(Error::Fit("no domains are available for the area-level model".into()));
        }
        if self.psi.len() != m || self.z.len() != m || self.domains.len() != m {
            return Err(Error::Parameter("area-level input columns differ in length".into()));
        }
        let p = self.ncols();
        if self.z.iter().any(|r| r.len() != p) {
            return Err(Error::Parameter("ragged covariate rows".into()));
        }
        if m < p + min_extra {
            return Err(Error::Fit(format!(
                "{m} domains are too few for {p} regression coefficients (need at least {})",
                p + min_extra
            )));
        }
        if let Some(i) = (0..m).find(|&i| !(self.psi[i] > 0.0) || !self.psi[i].is_finite() || !self.y[i].is_finite()) {
            return Err(Error::Parameter(format!(
                "domain {}: log estimate must be finite and its variance positive",
                self.domains[i]
            )));
        }
        Ok(())
    }

    fn design(&self) -> DMatrix<f64> {
        linalg::design_matrix(self.z.iter().map(Vec::as_slice), self.ncols(), false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarianceMethod {
    #[default]
    Reml,
    Moment,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FhFit {
    pub beta: Vec<f64>,
    pub sigma2_u: f64,
    pub gamma: Vec<f64>,
    /// Synthetic regression predictions `z_m'β̂`.
    pub synthetic: Vec<f64>,
    pub eblup_log: Vec<f64>,
    /// Method that produced σ̂_u²; REML that failed to converge reports the
    /// moment fallback.
    pub method: VarianceMethod,
    pub iterations: usize,
}

/// GLS coefficients with weights `1 / (σ² + ψ_m)`.
pub fn gls_beta(z: &DMatrix<f64>, y: &[f64], psi: &[f64], sigma2: f64) -> Result<Vec<f64>> {
    let w: Vec<f64> = psi.iter().map(|p| 1.0 / (sigma2 + p)).collect();
    linalg::weighted_least_squares(z, y, Some(&w))
        .map(|b| b.iter().copied().collect())
        .ok_or_else(|| Error::Fit("area-level covariate matrix is rank deficient".into()))
}

fn moment_lhs(z: &DMatrix<f64>, y: &[f64], psi: &[f64], sigma2: f64) -> Result<f64> {
    let beta = gls_beta(z, y, psi, sigma2)?;
    Ok((0..y.len())
        .map(|i| {
            let fit: f64 = z.row(i).iter().zip(&beta).map(|(a, b)| a * b).sum();
            (y[i] - fit).powi(2) / (sigma2 + psi[i])
        })
        .sum())
}

/// Find `σ² ≥ 0` with `f(σ²) = target` for a function decreasing in σ²;
/// 0 when `f(0) ≤ target`.
pub(crate) fn solve_decreasing<F>(target: f64, mut f: F) -> Result<f64>
where
    F: FnMut(f64) -> Result<f64>,
{
    if f(0.0)? <= target {
        return Ok(0.0);
    }
    let mut hi = 1.0;
    let mut guard = 0;
    while f(hi)? > target {
        hi *= 2.0;
        guard += 1;
        if guard > 200 {
            return Err(Error::NotConverged {
                what: "moment equation bracketing",
                iterations: guard,
                last_change: hi,
            });
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid)? > target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-14 * hi.max(1e-300) {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Fay–Herriot moment estimator: `Σ (y − z'β̂(σ²))² / (σ² + ψ) = M − p`.
pub fn moment_sigma2(z: &DMatrix<f64>, y: &[f64], psi: &[f64]) -> Result<f64> {
    let target = (y.len() - z.ncols()) as f64;
    solve_decreasing(target, |s| moment_lhs(z, y, psi, s))
}

/// REML by Fisher scoring on σ². Returns `(σ², iterations)`.
pub fn reml_sigma2(z: &DMatrix<f64>, y: &[f64], psi: &[f64], start: f64) -> Result<(f64, usize)> {
    let m = y.len();
    let yv = DVector::from_column_slice(y);
    let mut s2 = start.max(0.0);
    let mut last_change = f64::INFINITY;
    for iter in 1..=REML_MAX_ITER {
        let vinv = DVector::from_iterator(m, psi.iter().map(|p| 1.0 / (s2 + p)));
        let vinv_z = DMatrix::from_fn(m, z.ncols(), |i, j| vinv[i] * z[(i, j)]);
        let ztvz = z.transpose() * &vinv_z;
        let inv = linalg::inverse_spd(ztvz)
            .ok_or_else(|| Error::Fit("area-level covariate matrix is rank deficient".into()))?;
        let p = DMatrix::from_diagonal(&vinv) - &vinv_z * inv * vinv_z.transpose();
        let py = &p * &yv;
        let score = -0.5 * p.trace() + 0.5 * py.norm_squared();
        let info = 0.5 * p.component_mul(&p).sum();
        if !(info > 0.0) {
            return Err(Error::Fit("REML information is not positive".into()));
        }
        let next = (s2 + score / info).max(0.0);
        last_change = (next - s2).abs();
        s2 = next;
        if last_change < REML_TOL {
            return Ok((s2, iter));
        }
    }
    Err(Error::NotConverged {
        what: "REML Fisher scoring",
        iterations: REML_MAX_ITER,
        last_change,
    })
}

/// `σ² / (σ² + ψ)`.
pub fn shrinkage(sigma2: f64, psi: f64) -> f64 {
    sigma2 / (sigma2 + psi)
}

pub fn fit_fh(input: &FhInput, method: VarianceMethod) -> Result<FhFit> {
    input.validate(2)?;
    let z = input.design();
    let (y, psi) = (&input.y, &input.psi);
    let moment = moment_sigma2(&z, y, psi)?;
    let (sigma2_u, method, iterations) = match method {
        VarianceMethod::Moment => (moment, VarianceMethod::Moment, 0),
        VarianceMethod::Reml => {
            let start = if moment > 0.0 { moment } else { stats_median(psi) };
            match reml_sigma2(&z, y, psi, start) {
                Ok((s, it)) => (s, VarianceMethod::Reml, it),
                Err(e @ Error::NotConverged { .. }) => {
                    log::warn!("{e}; using the moment estimator");
                    (moment, VarianceMethod::Moment, REML_MAX_ITER)
                }
                Err(e) => return Err(e),
            }
        }
    };
    assemble(input, &z, sigma2_u, method, iterations)
}

fn stats_median(v: &[f64]) -> f64 {
    crate::stats::quantile(v, 0.5).unwrap_or(1.0)
}

fn assemble(
    input: &FhInput,
    z: &DMatrix<f64>,
    sigma2_u: f64,
    method: VarianceMethod,
    iterations: usize,
) -> Result<FhFit> {
    let beta = gls_beta(z, &input.y, &input.psi, sigma2_u)?;
    let synthetic: Vec<f64> = input
        .z
        .iter()
        .map(|r| r.iter().zip(&beta).map(|(a, b)| a * b).sum())
        .collect();
    let gamma: Vec<f64> = input.psi.iter().map(|&p| shrinkage(sigma2_u, p)).collect();
    let eblup_log = (0..input.len())
        .map(|i| gamma[i] * input.y[i] + (1.0 - gamma[i]) * synthetic[i])
        .collect();
    Ok(FhFit {
        beta,
        sigma2_u,
        gamma,
        synthetic,
        eblup_log,
        method,
        iterations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BootstrapMode {
    /// Refit the model in every round.
    Refit,
    /// Keep β̂ and σ̂_u² fixed; only the shrinkage prediction is recomputed.
    Fixed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FhMse {
    pub mse_log: Vec<f64>,
    /// Original-scale MSE from back-transforming inside each round.
    pub mse_orig: Vec<f64>,
    pub rounds: usize,
    pub failures: usize,
    /// Failures exceeded [`FAILURE_FLAG_SHARE`] of the rounds.
    pub flagged: bool,
}

/// Parametric bootstrap MSE of the log-scale EBLUP.
pub fn fh_mse_parametric_bootstrap(
    fit: &FhFit,
    input: &FhInput,
    rounds: usize,
    seed: u64,
    mode: BootstrapMode,
) -> Result<FhMse> {
    if rounds == 0 {
        return Err(Error::Parameter("parametric bootstrap needs at least one round".into()));
    }
    let m = input.len();
    let sd_u = fit.sigma2_u.sqrt();
    let per_round: Vec<Option<(Vec<f64>, Vec<f64>)>> = (0..rounds)
        .into_par_iter()
        .map(|b| {
            let mut rng = rng::stream(seed, "fh-bootstrap", b as u64);
            let std = Normal::new(0.0, 1.0).expect("unit normal");
            let truth: Vec<f64> = (0..m).map(|i| fit.synthetic[i] + sd_u * std.sample(&mut rng)).collect();
            let y: Vec<f64> = (0..m)
                .map(|i| truth[i] + input.psi[i].sqrt() * std.sample(&mut rng))
                .collect();
            let pred = match mode {
                BootstrapMode::Fixed => (0..m)
                    .map(|i| fit.gamma[i] * y[i] + (1.0 - fit.gamma[i]) * fit.synthetic[i])
                    .collect(),
                BootstrapMode::Refit => {
                    let boot = FhInput { y, ..input.clone() };
                    fit_fh(&boot, fit.method).ok()?.eblup_log
                }
            };
            Some((truth, pred))
        })
        .collect();
    let ok: Vec<&(Vec<f64>, Vec<f64>)> = per_round.iter().flatten().collect();
    let failures = rounds - ok.len();
    if ok.is_empty() {
        return Err(Error::Fit("every parametric bootstrap refit failed".into()));
    }
    let n = ok.len() as f64;
    let mse_log: Vec<f64> = (0..m)
        .map(|i| ok.iter().map(|(t, p)| (p[i] - t[i]).powi(2)).sum::<f64>() / n)
        .collect();
    let mse_orig = (0..m)
        .map(|i| {
            ok.iter()
                .map(|(t, p)| (back_transform(p[i], mse_log[i]).value - t[i].exp()).powi(2))
                .sum::<f64>()
                / n
        })
        .collect();
    let flagged = failures as f64 > FAILURE_FLAG_SHARE * rounds as f64;
    if flagged {
        log::warn!("{failures} of {rounds} parametric bootstrap refits failed");
    }
    Ok(FhMse {
        mse_log,
        mse_orig,
        rounds,
        failures,
        flagged,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackTransformed {
    pub value: f64,
    /// Delta-method original-scale MSE `value² (exp(MSE_log) − 1)`.
    pub mse: f64,
}

/// Log-normal bias-corrected back-transform `exp(t̃ + MSE/2)`.
pub fn back_transform(eblup_log: f64, mse_log: f64) -> BackTransformed {
    let value = (eblup_log + 0.5 * mse_log).exp();
    BackTransformed {
        value,
        mse: value * value * mse_log.exp_m1(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input<R: AsRef<[f64]>>(y: &[f64], psi: &[f64], z: &[R]) -> FhInput {
        FhInput::with_intercept(
            (0..y.len()).map(|i| format!("d{i}")).collect(),
            y.to_vec(),
            psi.to_vec(),
            z.iter().map(|r| r.as_ref().to_vec()).collect(),
        )
    }

    #[test]
    fn shrinkage_formula() {
        assert_eq!(shrinkage(1.0, 3.0), 0.25);
    }

    #[test]
    fn balanced_intercept_only_closed_form() {
        let y = [1.0, 2.5, 0.3, 4.0, 2.2, 1.7, 3.1];
        let m = y.len() as f64;
        let mean = y.iter().sum::<f64>() / m;
        let s2 = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0);
        for psi in [0.1, 1.0, 5.0] {
            let inp = input(&y, &[psi; 7], &[&[]; 7]);
            let fit = fit_fh(&inp, VarianceMethod::Reml).unwrap();
            assert!(
                (fit.sigma2_u - (s2 - psi).max(0.0)).abs() < 1e-6,
                "psi {psi}: {}",
                fit.sigma2_u
            );
            // The moment equation has the same root in the balanced case.
            let mom = fit_fh(&inp, VarianceMethod::Moment).unwrap();
            assert!((mom.sigma2_u - (s2 - psi).max(0.0)).abs() < 1e-6);
        }
    }

    #[test]
    fn tiny_sampling_variance_reproduces_direct() {
        let y = [1.0, 2.0, 0.5, 3.0, 2.5];
        let z: [&[f64]; 5] = [&[0.1], &[0.5], &[0.2], &[0.9], &[0.4]];
        let fit = fit_fh(&input(&y, &[1e-12; 5], &z), VarianceMethod::Reml).unwrap();
        for (e, d) in fit.eblup_log.iter().zip(y) {
            assert!((e - d).abs() < 1e-6);
        }
    }

    #[test]
    fn convex_combination_and_gls_residual() {
        let y = [1.0, 2.0, 0.5, 3.0, 2.5, 1.2, 0.7, 2.9];
        let psi = [0.3, 0.1, 0.5, 0.2, 0.4, 0.25, 0.6, 0.15];
        let z: [&[f64]; 8] = [&[0.1], &[0.5], &[0.2], &[0.9], &[0.4], &[0.3], &[0.05], &[0.8]];
        let inp = input(&y, &psi, &z);
        let fit = fit_fh(&inp, VarianceMethod::Reml).unwrap();
        for i in 0..8 {
            let (lo, hi) = (y[i].min(fit.synthetic[i]), y[i].max(fit.synthetic[i]));
            assert!(fit.eblup_log[i] >= lo - 1e-12 && fit.eblup_log[i] <= hi + 1e-12);
            assert_eq!(fit.gamma[i], fit.sigma2_u / (fit.sigma2_u + psi[i]));
        }
        for j in 0..2 {
            let r: f64 = (0..8)
                .map(|i| inp.z[i][j] * (y[i] - fit.synthetic[i]) / (fit.sigma2_u + psi[i]))
                .sum();
            assert!(r.abs() < 1e-8, "{r}");
        }
    }

    #[test]
    fn shift_invariance_with_intercept() {
        let y = [1.0, 2.0, 0.5, 3.0, 2.5, 1.2];
        let psi = [0.3, 0.1, 0.5, 0.2, 0.4, 0.25];
        let z: [&[f64]; 6] = [&[0.1], &[0.5], &[0.2], &[0.9], &[0.4], &[0.3]];
        let a = fit_fh(&input(&y, &psi, &z), VarianceMethod::Reml).unwrap();
        let shifted: Vec<f64> = y.iter().map(|v| v + 10.0).collect();
        let b = fit_fh(&input(&shifted, &psi, &z), VarianceMethod::Reml).unwrap();
        assert!((a.sigma2_u - b.sigma2_u).abs() < 1e-8);
        assert!((a.beta[0] + 10.0 - b.beta[0]).abs() < 1e-8);
    }

    #[test]
    fn errors() {
        let inp = input(&[1.0, 2.0, 3.0], &[0.1; 3], &[&[1.0]; 3]);
        assert!(matches!(fit_fh(&inp, VarianceMethod::Reml), Err(Error::Fit(_))));
        let inp = input(&[1.0, 2.0, 3.0, 4.0, 5.0], &[0.1; 5], &[&[1.0]; 5]);
        assert!(matches!(fit_fh(&inp, VarianceMethod::Reml), Err(Error::Fit(_))));
        let inp = input(&[1.0, 2.0, 3.0, 4.0], &[0.0; 4], &[&[]; 4]);
        assert!(matches!(fit_fh(&inp, VarianceMethod::Reml), Err(Error::Parameter(_))));
    }

    #[test]
    fn back_transform_examples() {
        assert_eq!(back_transform(0.0, 0.0).value, 1.0);
        let b = back_transform(100f64.ln(), 0.04);
        assert!((b.value - 100.0 * 0.02f64.exp()).abs() < 1e-10);
        assert!((b.mse - b.value.powi(2) * (0.04f64.exp() - 1.0)).abs() < 1e-9);
    }

    #[test]
    fn bootstrap_mse_vanishes_without_randomness() {
        let y = [1.0, 1.0, 1.0, 1.0, 1.0];
        let fit = fit_fh(&input(&y, &[1e-12; 5], &[&[]; 5]), VarianceMethod::Reml).unwrap();
        assert_eq!(fit.sigma2_u, 0.0);
        let mse =
            fh_mse_parametric_bootstrap(&fit, &input(&y, &[1e-12; 5], &[&[]; 5]), 50, 1, BootstrapMode::Refit).unwrap();
        assert!(mse.mse_log.iter().all(|&v| (0.0..1e-10).contains(&v)));
    }
}
