//! Ybarra–Lohr Fay–Herriot model with one error-prone area covariate.
//!
//! The last regressor `ẑ_m` (the log IPW proxy total) is observed with known
//! error variance `C_m`. Estimation alternates a measurement-error corrected
//! weighted least-squares step for β with a moment update for σ_u², using
//! working variances `σ_u² + ψ_m + β_last² C_m`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fh::{self, solve_decreasing, FhInput, VarianceMethod};

const MAX_ITER: usize = 200;
const TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct YlInput {
    pub domains: Vec<String>,
    /// Direct log-scale estimates.
    pub y: Vec<f64>,
    pub psi: Vec<f64>,
    /// Exactly known covariates including the intercept.
    pub z: Vec<Vec<f64>>,
    /// Error-prone covariate.
    pub z_star: Vec<f64>,
    /// Error variance of `z_star`, nonnegative.
    pub c: Vec<f64>,
}

impl YlInput {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Regressor rows `(z_m, ẑ_m)`.
    pub fn regressors(&self) -> Vec<Vec<f64>> {
        self.z
            .iter()
            .zip(&self.z_star)
            .map(|(r, &s)| r.iter().copied().chain(std::iter::once(s)).collect())
            .collect()
    }

    /// The same areas as a plain Fay–Herriot input with `ẑ` as an ordinary
    /// covariate.
    pub fn augmented(&self) -> FhInput {
        FhInput {
            domains: self.domains.clone(),
            y: self.y.clone(),
            psi: self.psi.clone(),
            z: self.regressors(),
        }
    }

    fn validate(&self, min_extra: usize) -> Result<()> {
        let m = self.len();
        if self.z_star.len() != m || self.c.len() != m {
            return Err(Error::Parameter(
                "error-prone covariate columns differ in length".into(),
            ));
        }
        if let Some(i) = (0..m).find(|&i| !(self.c[i] >= 0.0) || !self.z_star[i].is_finite()) {
            return Err(Error::Parameter(format!(
                "domain {}: error-prone covariate must be finite with nonnegative error variance",
                self.domains[i]
            )));
        }
        let p = self.z.first().map_or(0, Vec::len) + 1;
        if m < p + min_extra {
            return Err(Error::Fit(format!(
                "{m} domains are too few for the measurement-error model with {p} coefficients (need at least {})",
                p + min_extra
            )));
        }
        Ok(())
    }

    fn subset(&self, keep: impl Fn(usize) -> bool) -> Self {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(i)).collect();
        let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
        Self {
            domains: idx.iter().map(|&i| self.domains[i].clone()).collect(),
            y: pick(&self.y),
            psi: pick(&self.psi),
            z: idx.iter().map(|&i| self.z[i].clone()).collect(),
            z_star: pick(&self.z_star),
            c: pick(&self.c),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct YlFit {
    /// `(β_0..β_q, β_{q+1})`, the last entry multiplying `ẑ`.
    pub beta: Vec<f64>,
    pub sigma2_u: f64,
    pub gamma: Vec<f64>,
    /// Regression predictions `(z, ẑ)'β̂`.
    pub synthetic: Vec<f64>,
    pub prediction_log: Vec<f64>,
    pub iterations: usize,
}

/// `(σ² + β² C) / (σ² + ψ + β² C)`.
pub fn yl_gamma(sigma2: f64, psi: f64, beta_last: f64, c: f64) -> f64 {
    let extra = sigma2 + beta_last * beta_last * c;
    extra / (extra + psi)
}

fn residual_sum(x: &[Vec<f64>], input: &YlInput, beta: &[f64], sigma2: f64) -> f64 {
    let b2 = beta[beta.len() - 1].powi(2);
    (0..input.len())
        .map(|i| {
            let fit: f64 = x[i].iter().zip(beta).map(|(a, b)| a * b).sum();
            (input.y[i] - fit).powi(2) / (sigma2 + input.psi[i] + b2 * input.c[i])
        })
        .sum()
}

/// Measurement-error corrected weighted least squares for β.
fn corrected_beta(x: &[Vec<f64>], input: &YlInput, sigma2: f64, beta_last: f64) -> Result<Vec<f64>> {
    let p = x[0].len();
    let mut a = DMatrix::<f64>::zeros(p, p);
    let mut b = DVector::<f64>::zeros(p);
    for (i, xi) in x.iter().enumerate() {
        let w = 1.0 / (sigma2 + input.psi[i] + beta_last * beta_last * input.c[i]);
        for r in 0..p {
            b[r] += w * xi[r] * input.y[i];
            for s in 0..p {
                a[(r, s)] += w * xi[r] * xi[s];
            }
        }
        a[(p - 1, p - 1)] -= w * input.c[i];
    }
    let beta = a.cholesky().map(|ch| ch.solve(&b)).ok_or_else(|| {
        Error::Fit(
            "corrected cross-product matrix is not positive definite; the error variances of the proxy covariate look too large"
                .into(),
        )
    })?;
    Ok(beta.iter().copied().collect())
}

pub fn fit_yl(input: &YlInput) -> Result<YlFit> {
    input.validate(2)?;
    let aug = input.augmented();
    // Start from the moment fit that ignores the measurement error.
    let start = fh::fit_fh(&aug, VarianceMethod::Moment)?;
    let x = &aug.z;
    let p = x[0].len();
    let target = (input.len() - p) as f64;
    let mut beta = start.beta;
    let mut sigma2 = start.sigma2_u;
    let mut last_change = f64::INFINITY;
    for iter in 1..=MAX_ITER {
        let next_beta = corrected_beta(x, input, sigma2, beta[p - 1])?;
        let next_sigma2 = solve_decreasing(target, |s| Ok(residual_sum(x, input, &next_beta, s)))?;
        last_change = beta
            .iter()
            .zip(&next_beta)
            .map(|(a, b)| (a - b).abs() / a.abs().max(1.0))
            .fold((next_sigma2 - sigma2).abs() / sigma2.max(1.0), f64::max);
        beta = next_beta;
        sigma2 = next_sigma2;
        if last_change < TOL {
            return Ok(assemble(input, x, beta, sigma2, iter));
        }
    }
    Err(Error::NotConverged {
        what: "Ybarra-Lohr iteration",
        iterations: MAX_ITER,
        last_change,
    })
}

fn assemble(input: &YlInput, x: &[Vec<f64>], beta: Vec<f64>, sigma2_u: f64, iterations: usize) -> YlFit {
    let synthetic: Vec<f64> = x
        .iter()
        .map(|r| r.iter().zip(&beta).map(|(a, b)| a * b).sum())
        .collect();
    let bl = beta[beta.len() - 1];
    let gamma: Vec<f64> = (0..input.len())
        .map(|i| yl_gamma(sigma2_u, input.psi[i], bl, input.c[i]))
        .collect();
    let prediction_log = yl_predict_with(&gamma, &input.y, &synthetic);
    YlFit {
        beta,
        sigma2_u,
        gamma,
        synthetic,
        prediction_log,
        iterations,
    }
}

fn yl_predict_with(gamma: &[f64], y: &[f64], synthetic: &[f64]) -> Vec<f64> {
    (0..y.len())
        .map(|i| gamma[i] * y[i] + (1.0 - gamma[i]) * synthetic[i])
        .collect()
}

/// Shrinkage prediction `γ t̂ + (1 − γ)(z, ẑ)'β̂` under given parameters.
pub fn yl_predict(beta: &[f64], sigma2_u: f64, input: &YlInput) -> Vec<f64> {
    let x = input.regressors();
    let synthetic: Vec<f64> = x.iter().map(|r| r.iter().zip(beta).map(|(a, b)| a * b).sum()).collect();
    let bl = beta[beta.len() - 1];
    let gamma: Vec<f64> = (0..input.len())
        .map(|i| yl_gamma(sigma2_u, input.psi[i], bl, input.c[i]))
        .collect();
    yl_predict_with(&gamma, &input.y, &synthetic)
}

#[derive(Debug, Clone, PartialEq)]
pub struct YlMse {
    pub mse_log: Vec<f64>,
    /// Domains whose jackknife MSE was negative and floored.
    pub floored: Vec<bool>,
    pub failures: usize,
    /// Failures exceeded 10% of the delete-one refits.
    pub flagged: bool,
}

/// Delete-one-area jackknife MSE with leading term `g1_m = γ_m ψ_m`.
pub fn yl_jackknife_mse(input: &YlInput, fit: &YlFit) -> Result<YlMse> {
    input.validate(3)?;
    let m = input.len();
    let g1 = |beta: &[f64], s2: f64| -> Vec<f64> {
        let bl = beta[beta.len() - 1];
        (0..m)
            .map(|i| yl_gamma(s2, input.psi[i], bl, input.c[i]) * input.psi[i])
            .collect()
    };
    let g1_full = g1(&fit.beta, fit.sigma2_u);
    let reps: Vec<Option<(Vec<f64>, Vec<f64>)>> = (0..m)
        .into_par_iter()
        .map(|l| {
            let sub = input.subset(|i| i != l);
            let f = fit_yl(&sub).ok()?;
            Some((g1(&f.beta, f.sigma2_u), yl_predict(&f.beta, f.sigma2_u, input)))
        })
        .collect();
    let ok: Vec<&(Vec<f64>, Vec<f64>)> = reps.iter().flatten().collect();
    let failures = m - ok.len();
    let k = (m as f64 - 1.0) / m as f64;
    let mut floored = vec![false; m];
    let mse_log = (0..m)
        .map(|i| {
            let bias: f64 = ok.iter().map(|(g, _)| g[i] - g1_full[i]).sum();
            let var: f64 = ok.iter().map(|(_, t)| (t[i] - fit.prediction_log[i]).powi(2)).sum();
            let v = g1_full[i] - k * bias + k * var;
            if v < 0.0 {
                floored[i] = true;
                0.01 * g1_full[i]
            } else {
                v
            }
        })
        .collect();
    let flagged = failures as f64 > fh::FAILURE_FLAG_SHARE * m as f64;
    if flagged {
        log::warn!("{failures} of {m} delete-one refits failed");
    }
    Ok(YlMse {
        mse_log,
        floored,
        failures,
        flagged,
    })
}

/// Same log-normal correction as the Fay–Herriot back-transform.
pub fn yl_back_transform(prediction_log: f64, mse_log: f64) -> fh::BackTransformed {
    fh::back_transform(prediction_log, mse_log)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(c: f64) -> YlInput {
        let y = vec![1.0, 2.1, 0.4, 3.2, 2.4, 1.1, 0.9, 2.8, 1.7, 2.2];
        let zs = vec![0.8, 2.0, 0.6, 3.0, 2.6, 1.3, 0.7, 2.5, 1.5, 2.4];
        let z1 = [0.1, 0.5, 0.2, 0.9, 0.4, 0.3, 0.05, 0.8, 0.35, 0.6];
        YlInput {
            domains: (0..10).map(|i| format!("d{i}")).collect(),
            y,
            psi: vec![0.05, 0.1, 0.08, 0.04, 0.12, 0.07, 0.09, 0.06, 0.11, 0.05],
            z: z1.iter().map(|&v| vec![1.0, v]).collect(),
            z_star: zs,
            c: vec![c; 10],
        }
    }

    #[test]
    fn gamma_formula() {
        assert_eq!(yl_gamma(1.0, 3.0, 2.0, 0.5), 0.5);
    }

    #[test]
    fn zero_error_reduces_to_moment_fh() {
        let inp = toy(0.0);
        let yl = fit_yl(&inp).unwrap();
        let fh = fh::fit_fh(&inp.augmented(), VarianceMethod::Moment).unwrap();
        assert!((yl.sigma2_u - fh.sigma2_u).abs() < 1e-6);
        for (a, b) in yl.beta.iter().zip(&fh.beta) {
            assert!((a - b).abs() < 1e-6);
        }
        for (a, b) in yl.gamma.iter().zip(&fh.gamma) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn gamma_non_decreasing_in_c() {
        let mut last = 0.0;
        for c in [0.0, 0.01, 0.1, 1.0] {
            let g = yl_gamma(0.2, 0.1, 0.9, c);
            assert!(g >= last);
            last = g;
        }
    }

    #[test]
    fn prediction_is_convex_combination() {
        let inp = toy(0.02);
        let fit = fit_yl(&inp).unwrap();
        for i in 0..inp.len() {
            let (lo, hi) = (inp.y[i].min(fit.synthetic[i]), inp.y[i].max(fit.synthetic[i]));
            assert!(fit.prediction_log[i] >= lo - 1e-12 && fit.prediction_log[i] <= hi + 1e-12);
        }
        let mse = yl_jackknife_mse(&inp, &fit).unwrap();
        assert!(mse.mse_log.iter().all(|&v| v >= 0.0));
        assert_eq!(mse.failures, 0);
    }

    #[test]
    fn extreme_shrinkage_predictions() {
        let inp = toy(0.0);
        let beta = vec![0.3, 0.2, 0.7];
        // σ² huge: γ → 1 gives the direct estimate.
        let p = yl_predict(&beta, 1e12, &inp);
        assert!((p[3] - inp.y[3]).abs() < 1e-9);
        // σ² = 0 and C = 0 with tiny ψ relative to nothing: γ = 0.
        let p = yl_predict(&beta, 0.0, &inp);
        assert!((p[3] - (0.3 + 0.2 * 0.9 + 0.7 * 3.0)).abs() < 1e-12);
    }

    #[test]
    fn huge_error_variance_is_rejected() {
        let inp = toy(1e3);
        assert!(matches!(fit_yl(&inp), Err(Error::Fit(_))));
    }
}
