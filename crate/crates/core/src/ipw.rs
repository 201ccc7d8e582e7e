//! Propensity of membership in the non-probability source and the inverse
//! propensity weighted (Hájek form) estimator of the proxy domain totals.

use std::io::Write;

use crate::error::{Error, Result};
use crate::frame::PopulationFrame;
use crate::logistic::{self, LogisticOptions};
use crate::resample::IpwDonor;

/// Propensities are clipped to `[PI_CLIP, 1 − PI_CLIP]`.
pub const PI_CLIP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct PropensityModel {
    /// Intercept first, then one coefficient per selected covariate.
    pub coef: Vec<f64>,
    /// Frame x-column positions used as covariates.
    pub covariates: Vec<usize>,
    /// Clipped π̂ for every frame unit, in frame order.
    pub pi: Vec<f64>,
}

/// Logistic regression of δ on `(1, x_subset)` over the whole frame.
pub fn fit_propensity(frame: &PopulationFrame, covariates: &[usize]) -> Result<PropensityModel> {
    if let Some(&c) = covariates.iter().find(|&&c| c >= frame.p()) {
        return Err(Error::Parameter(format!(
            "propensity covariate column {c} out of range"
        )));
    }
    let feats: Vec<Vec<f64>> = frame
        .units()
        .iter()
        .map(|u| covariates.iter().map(|&c| u.x[c]).collect())
        .collect();
    let refs: Vec<&[f64]> = feats.iter().map(Vec::as_slice).collect();
    let delta: Vec<bool> = frame.units().iter().map(|u| u.delta()).collect();
    let fit = logistic::fit_logistic(&refs, &delta, &LogisticOptions::default()).map_err(|e| match e {
        Error::Separation(msg) => Error::Separation(format!(
            "{msg}; membership is perfectly predicted, reduce the propensity covariates"
        )),
        other => other,
    })?;
    let pi = feats
        .iter()
        .map(|x| fit.probability(x).clamp(PI_CLIP, 1.0 - PI_CLIP))
        .collect();
    Ok(PropensityModel {
        coef: fit.coef,
        covariates: covariates.to_vec(),
        pi,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuxTotalEstimate {
    pub domain: String,
    pub value: f64,
    /// Bootstrap variance of the log estimate, once computed.
    pub log_variance: Option<f64>,
    /// `|B_m|`.
    pub n_b: usize,
}

/// `(N_m / Σ_{B_m} 1/π̂) Σ_{B_m} y*/π̂`.
pub fn ipw_total(frame: &PopulationFrame, model: &PropensityModel, domain: &str) -> Result<AuxTotalEstimate> {
    let (mut num, mut den, mut n_b) = (0.0, 0.0, 0);
    for (u, &pi) in frame.units().iter().zip(&model.pi) {
        if u.domain != domain {
            continue;
        }
        if let Some(ys) = u.y_star {
            num += ys / pi;
            den += 1.0 / pi;
            n_b += 1;
        }
    }
    if n_b == 0 {
        return Err(Error::NoData { domain: domain.into() });
    }
    Ok(AuxTotalEstimate {
        domain: domain.into(),
        value: frame.domain_size(domain) as f64 * num / den,
        log_variance: None,
        n_b,
    })
}

/// IPW totals for every domain with at least one covered unit; domains
/// without coverage are logged and skipped.
pub fn ipw_totals(frame: &PopulationFrame, model: &PropensityModel) -> Vec<AuxTotalEstimate> {
    frame
        .domains()
        .filter_map(|m| match ipw_total(frame, model, m) {
            Ok(e) => Some(e),
            Err(_) => {
                log::warn!("domain {m} has no units in the non-probability source; no IPW total");
                None
            }
        })
        .collect()
}

/// Donors for the pseudo-population bootstrap, with domain positions in
/// frame domain order.
pub fn donors(frame: &PopulationFrame, model: &PropensityModel) -> Vec<IpwDonor> {
    let domains: Vec<&str> = frame.domains().collect();
    frame
        .units()
        .iter()
        .zip(&model.pi)
        .filter_map(|(u, &pi)| {
            u.y_star.map(|y_star| IpwDonor {
                domain: domains.binary_search(&u.domain.as_str()).expect("frame domain"),
                y_star,
                pi,
            })
        })
        .collect()
}

/// Write `unit_id,pi_hat` for every frame unit.
pub fn write_pi_hat<W: Write>(frame: &PopulationFrame, model: &PropensityModel, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["unit_id", "pi_hat"])?;
    for (u, pi) in frame.units().iter().zip(&model.pi) {
        w.write_record([u.unit_id.as_str(), &pi.to_string()])?;
    }
    w.flush().map_err(|e| Error::io("pi_hat.csv", e))?;
    Ok(())
}
