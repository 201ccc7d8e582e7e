//! Maximum-likelihood logistic regression by Newton–Raphson.
//!
//! Used both for the positive-part probability of the hurdle working model
//! and for the propensity of membership in the non-probability source.
//! Features are standardised internally; convergence and separation are
//! judged on the standardised coefficients, which makes both checks
//! independent of the units the auxiliary variables are recorded in.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct LogisticOptions {
    pub max_iter: usize,
    /// Convergence when the largest coefficient change falls below this.
    pub tol: f64,
    /// Any standardised coefficient beyond this magnitude signals separation.
    pub separation_bound: f64,
}

impl Default for LogisticOptions {
    fn default() -> Self {
        Self {
            max_iter: 50,
            tol: 1e-8,
            separation_bound: 15.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    /// Intercept first, then one slope per feature, on the original scale.
    pub coef: Vec<f64>,
    pub iterations: usize,
}

impl LogisticFit {
    pub fn linear_predictor(&self, features: &[f64]) -> f64 {
        self.coef[0] + self.coef[1..].iter().zip(features).map(|(c, x)| c * x).sum::<f64>()
    }

    pub fn probability(&self, features: &[f64]) -> f64 {
        inv_logit(self.linear_predictor(features))
    }
}

pub fn inv_logit(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Fit `P(y = 1 | x) = inv_logit(b0 + x'b)`. `features` holds one row per
/// observation without the intercept column; rows may be empty for an
/// intercept-only fit.
pub fn fit_logistic(features: &[&[f64]], response: &[bool], opts: &LogisticOptions) -> Result<LogisticFit> {
    let n = features.len();
    if n != response.len() {
        return Err(Error::Parameter("feature and response lengths differ".into()));
    }
    let positives = response.iter().filter(|&&r| r).count();
    if positives == 0 || positives == n {
        return Err(Error::Degenerate(format!(
            "logistic response has {positives} positives out of {n}; both outcomes are required"
        )));
    }
    let p = features.first().map_or(0, |r| r.len());
    if features.iter().any(|r| r.len() != p) {
        return Err(Error::Parameter("ragged feature rows".into()));
    }

    let mut centre = vec![0.0; p];
    let mut scale = vec![1.0; p];
    for j in 0..p {
        let m = features.iter().map(|r| r[j]).sum::<f64>() / n as f64;
        let v = features.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / n as f64;
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::SingularFit(format!(
                "logistic feature {j} is constant; it is collinear with the intercept"
            )));
        }
        centre[j] = m;
        scale[j] = v.sqrt();
    }
    let k = p + 1;
    let mut xs = DMatrix::<f64>::zeros(n, k);
    for (i, row) in features.iter().enumerate() {
        xs[(i, 0)] = 1.0;
        for j in 0..p {
            xs[(i, j + 1)] = (row[j] - centre[j]) / scale[j];
        }
    }
    let y: Vec<f64> = response.iter().map(|&r| f64::from(u8::from(r))).collect();

    let mut beta = DVector::<f64>::zeros(k);
    let mut last_change = f64::INFINITY;
    for iter in 1..=opts.max_iter {
        let mut hess = DMatrix::<f64>::zeros(k, k);
        let mut grad = DVector::<f64>::zeros(k);
        for i in 0..n {
            let eta: f64 = (0..k).map(|a| xs[(i, a)] * beta[a]).sum();
            let pi = inv_logit(eta);
            let w = pi * (1.0 - pi);
            let resid = y[i] - pi;
            for a in 0..k {
                grad[a] += xs[(i, a)] * resid;
                for b in a..k {
                    hess[(a, b)] += w * xs[(i, a)] * xs[(i, b)];
                }
            }
        }
        for a in 0..k {
            for b in 0..a {
                hess[(a, b)] = hess[(b, a)];
            }
        }
        let step = hess
            .cholesky()
            .ok_or_else(|| Error::Separation("information matrix is not positive definite".into()))?
            .solve(&grad);
        beta += &step;
        last_change = step.amax();
        if let Some(j) = (0..k).find(|&j| beta[j].abs() > opts.separation_bound) {
            return Err(Error::Separation(format!(
                "standardised coefficient {j} reached {:.3} after {iter} iterations",
                beta[j]
            )));
        }
        if last_change < opts.tol {
            return Ok(LogisticFit {
                coef: unstandardise(&beta, &centre, &scale),
                iterations: iter,
            });
        }
    }
    Err(Error::NotConverged {
        what: "logistic Newton-Raphson",
        iterations: opts.max_iter,
        last_change,
    })
}

fn unstandardise(beta: &DVector<f64>, centre: &[f64], scale: &[f64]) -> Vec<f64> {
    let mut coef = Vec::with_capacity(beta.len());
    let mut intercept = beta[0];
    for j in 0..centre.len() {
        intercept -= beta[j + 1] * centre[j] / scale[j];
    }
    coef.push(intercept);
    coef.extend((0..centre.len()).map(|j| beta[j + 1] / scale[j]));
    coef
}
