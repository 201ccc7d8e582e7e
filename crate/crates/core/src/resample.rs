//! Bootstrap variance estimation.
//!
//! The Rao–Wu–Yue bootstrap resamples `n_h − 1` units with replacement in
//! every stratum of the probability sample and rescales the design weights.
//! The pseudo-population bootstrap clones the units of the non-probability
//! source according to their inverse propensities and redraws them by
//! Poisson sampling. Replicate `r` always draws from its own random stream,
//! so results do not depend on the thread schedule.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::frame::{ProbabilitySample, StratumDesign};
use crate::rng;
use crate::stats;

/// Share of nonpositive replicates above which a log-scale variance is
/// flagged unstable.
pub const LOG_UNSTABLE_SHARE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateWeights {
    pub replicate: usize,
    /// `d*` aligned with the sample rows.
    pub weights: Vec<f64>,
    /// `m*` aligned with the sample rows.
    pub multiplicities: Vec<u32>,
}

/// Row positions of the sample grouped by stratum label.
fn stratum_rows(sample: &ProbabilitySample) -> BTreeMap<&str, Vec<usize>> {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (k, r) in sample.rows().iter().enumerate() {
        groups.entry(r.stratum.as_str()).or_default().push(k);
    }
    groups
}

/// Merge every stratum holding a single sampled unit into its neighbour in
/// label order (the following stratum, or the preceding one for the last).
/// Design weights are kept; merged strata are labelled `a+b`.
pub fn collapse_singleton_strata(sample: &ProbabilitySample) -> Result<ProbabilitySample> {
    let mut groups: Vec<(String, Vec<usize>, StratumDesign)> = stratum_rows(sample)
        .into_iter()
        .map(|(h, rows)| {
            let sd = sample.strata().get(h).copied().unwrap_or(StratumDesign {
                population: 0,
                sample: rows.len(),
            });
            (h.to_string(), rows, sd)
        })
        .collect();
    if !groups.iter().any(|g| g.1.len() == 1) {
        return Ok(sample.clone());
    }
    if sample.len() < 2 {
        return Err(Error::Design(
            "cannot collapse strata: the sample has fewer than two units".into(),
        ));
    }
    while let Some(i) = groups.iter().position(|g| g.1.len() == 1) {
        let j = if i + 1 < groups.len() { i + 1 } else { i - 1 };
        let (lo, hi) = (i.min(j), i.max(j));
        let (hl, rows, sd) = groups.remove(hi);
        let g = &mut groups[lo];
        log::warn!(
            "stratum {hl:?} or {:?} has a single sampled unit; collapsing the two",
            g.0
        );
        g.0 = format!("{}+{hl}", g.0);
        g.1.extend(rows);
        g.2 = StratumDesign {
            population: g.2.population + sd.population,
            sample: g.2.sample + sd.sample,
        };
    }
    let mut rows = sample.rows().to_vec();
    let mut strata = BTreeMap::new();
    for (label, members, sd) in groups {
        for k in members {
            rows[k].stratum = label.clone();
        }
        strata.insert(label, sd);
    }
    Ok(ProbabilitySample::from_parts(rows, strata))
}

/// Replicate `r` of the Rao–Wu–Yue bootstrap.
pub fn rwy_replicate(sample: &ProbabilitySample, seed: u64, r: usize) -> Result<ReplicateWeights> {
    let groups = stratum_rows(sample);
    if let Some((h, _)) = groups.iter().find(|(_, rows)| rows.len() < 2) {
        return Err(Error::Design(format!(
            "stratum {h:?} has a single sampled unit; collapse strata before bootstrapping"
        )));
    }
    let mut rng = rng::stream(seed, "rwy", r as u64);
    let mut m = vec![0u32; sample.len()];
    for rows in groups.values() {
        for _ in 0..rows.len() - 1 {
            m[rows[rng.random_range(0..rows.len())]] += 1;
        }
    }
    let sizes: BTreeMap<&str, usize> = groups.iter().map(|(h, rows)| (*h, rows.len())).collect();
    let weights = sample
        .rows()
        .iter()
        .zip(&m)
        .map(|(row, &mi)| {
            let n_h = sizes[row.stratum.as_str()] as f64;
            n_h / (n_h - 1.0) * f64::from(mi) * row.d
        })
        .collect();
    Ok(ReplicateWeights {
        replicate: r,
        weights,
        multiplicities: m,
    })
}

/// A domain statistic evaluated under one set of replicate weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReplicateValue {
    pub value: f64,
    /// The estimator used its fallback in this replicate.
    pub fallback: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DomainReplicates {
    /// Replicate indices with a defined value.
    pub index: Vec<usize>,
    pub values: Vec<f64>,
    /// Replicates where the statistic was undefined or skipped.
    pub missing: usize,
    pub fallbacks: usize,
}

impl DomainReplicates {
    /// Sample variance with divisor `R − 1` over the defined replicates.
    pub fn variance(&self) -> Option<f64> {
        stats::sample_variance(&self.values)
    }

    pub fn log_variance(&self) -> LogVariance {
        log_scale_variance(&self.values)
    }
}

/// Run `estimate` under `replicates` RWY replicate weights. `estimate` maps a
/// weight vector aligned with the sample rows to one value per domain.
pub fn rwy_bootstrap<F>(
    sample: &ProbabilitySample,
    replicates: usize,
    seed: u64,
    estimate: F,
) -> Result<Vec<DomainReplicates>>
where
    F: Fn(&[f64]) -> Vec<Option<ReplicateValue>> + Sync,
{
    if replicates < 2 {
        return Err(Error::Parameter(format!(
            "at least 2 replicates are needed, got {replicates}"
        )));
    }
    let per_rep: Vec<Vec<Option<ReplicateValue>>> = (0..replicates)
        .into_par_iter()
        .map(|r| rwy_replicate(sample, seed, r).map(|w| estimate(&w.weights)))
        .collect::<Result<_>>()?;
    Ok(transpose(per_rep))
}

fn transpose(per_rep: Vec<Vec<Option<ReplicateValue>>>) -> Vec<DomainReplicates> {
    let domains = per_rep.first().map_or(0, Vec::len);
    let mut out = vec![DomainReplicates::default(); domains];
    for (r, values) in per_rep.into_iter().enumerate() {
        for (d, v) in out.iter_mut().zip(values) {
            match v {
                Some(v) => {
                    d.index.push(r);
                    d.values.push(v.value);
                    d.fallbacks += usize::from(v.fallback);
                }
                None => d.missing += 1,
            }
        }
    }
    out
}

/// Per-domain RWY variance of a statistic.
pub fn rwy_variance<F>(
    sample: &ProbabilitySample,
    replicates: usize,
    seed: u64,
    estimate: F,
) -> Result<Vec<Option<f64>>>
where
    F: Fn(&[f64]) -> Vec<Option<ReplicateValue>> + Sync,
{
    Ok(rwy_bootstrap(sample, replicates, seed, estimate)?
        .iter()
        .map(DomainReplicates::variance)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogVariance {
    /// Sample variance of the logs of the positive replicates.
    pub value: Option<f64>,
    pub nonpositive: usize,
    /// More than [`LOG_UNSTABLE_SHARE`] of the replicates were nonpositive.
    pub unstable: bool,
}

/// Variance of log replicate totals. Nonpositive replicates are dropped and
/// counted.
pub fn log_scale_variance(values: &[f64]) -> LogVariance {
    let logs: Vec<f64> = values.iter().filter(|&&v| v > 0.0).map(|v| v.ln()).collect();
    let nonpositive = values.len() - logs.len();
    LogVariance {
        value: stats::sample_variance(&logs),
        nonpositive,
        unstable: values.is_empty() || nonpositive as f64 > LOG_UNSTABLE_SHARE * values.len() as f64,
    }
}

/// Variance of the log IPW replicates.
pub fn c_star_variance(values: &[f64]) -> LogVariance {
    log_scale_variance(values)
}

/// One unit of the non-probability source as seen by the pseudo-population
/// bootstrap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IpwDonor {
    /// Domain position in the caller's domain list.
    pub domain: usize,
    pub y_star: f64,
    pub pi: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoPopulation {
    pub donors: Vec<IpwDonor>,
    /// Number of clones of each donor.
    pub counts: Vec<u64>,
}

impl PseudoPopulation {
    pub fn size(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Clone each donor `[w̃_i]` times, with `w̃_i = ŵ_i N / Σ ŵ` and
/// `ŵ_i = 1 / π̂_i`, rounding at random so that the clone counts sum to `N`.
///
/// After independent rounding (up with probability `frac(w̃_i)`), surplus or
/// deficit clones are removed or added by flipping the rounding of
/// uniformly chosen units.
pub fn build_pseudo_population(donors: Vec<IpwDonor>, n: u64, seed: u64) -> Result<PseudoPopulation> {
    let w_hat: Vec<f64> = donors.iter().map(|d| 1.0 / d.pi).collect();
    let counts = randomized_rounding(&w_hat, n, &mut rng::stream(seed, "pseudo-population", 0))?;
    Ok(PseudoPopulation { donors, counts })
}

/// Random rounding of `w N / Σ w` to integers summing to exactly `N`.
///
/// Systematic rounding: one uniform start `u` and unit `i` rounds up when a
/// point `u + k` falls in its slice of the cumulative fractional parts, so it
/// rounds up with probability equal to its fractional part.
pub fn randomized_rounding<R: Rng>(w: &[f64], n: u64, rng: &mut R) -> Result<Vec<u64>> {
    let total: f64 = w.iter().sum();
    if !(total > 0.0) || !total.is_finite() || w.iter().any(|&x| !(x >= 0.0)) {
        return Err(Error::Degenerate(
            "pseudo-population weights must be nonnegative with a positive sum".into(),
        ));
    }
    const SNAP: f64 = 1e-9;
    let mut counts = Vec::with_capacity(w.len());
    let mut fracs = Vec::with_capacity(w.len());
    let mut up = Vec::with_capacity(w.len());
    let start: f64 = rng.random();
    let mut cum = 0.0;
    for &x in w {
        let t = x * n as f64 / total;
        let mut fl = t.floor();
        let mut f = t - fl;
        if f < SNAP {
            f = 0.0;
        } else if f > 1.0 - SNAP {
            fl += 1.0;
            f = 0.0;
        }
        let before = cum;
        cum += f;
        let u = f > 0.0 && (cum - start).floor() > (before - start).floor();
        counts.push(fl as u64 + u64::from(u));
        fracs.push(f);
        up.push(u);
    }
    // The fractional parts sum to an integer only up to rounding error.
    let sum: u64 = counts.iter().sum();
    if sum != n {
        let lower = sum > n;
        let candidates: Vec<usize> = (0..w.len()).filter(|&i| fracs[i] > 0.0 && up[i] == lower).collect();
        let need = sum.abs_diff(n) as usize;
        if need > candidates.len() {
            return Err(Error::Degenerate(format!(
                "pseudo-population rounding cannot reach N = {n} (sum {sum}, {} adjustable units)",
                candidates.len()
            )));
        }
        for k in index::sample(rng, candidates.len(), need) {
            let i = candidates[k];
            if lower {
                counts[i] -= 1;
            } else {
                counts[i] += 1;
            }
        }
    }
    Ok(counts)
}

/// Poisson-resample the clones with their donors' π̂ and compute the
/// Hájek-form IPW total of every domain. `domain_sizes[m]` is `N_m`.
/// Replicates in which a domain has no selected clone are skipped for that
/// domain.
pub fn ipw_bootstrap(
    pp: &PseudoPopulation,
    domain_sizes: &[f64],
    replicates: usize,
    seed: u64,
) -> Result<Vec<DomainReplicates>> {
    if let Some(d) = pp.donors.iter().find(|d| !(d.pi > 0.0 && d.pi <= 1.0)) {
        return Err(Error::Parameter(format!("propensity {} outside (0, 1]", d.pi)));
    }
    if let Some(d) = pp.donors.iter().find(|d| d.domain >= domain_sizes.len()) {
        return Err(Error::Parameter(format!("donor domain {} out of range", d.domain)));
    }
    let binomials: Vec<Option<Binomial>> = pp
        .donors
        .iter()
        .zip(&pp.counts)
        .map(|(d, &c)| (c > 0 && d.pi < 1.0).then(|| Binomial::new(c, d.pi).expect("valid binomial")))
        .collect();
    let m = domain_sizes.len();
    let per_rep: Vec<Vec<Option<ReplicateValue>>> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng::stream(seed, "ipw-bootstrap", r as u64);
            let mut num = vec![0.0; m];
            let mut den = vec![0.0; m];
            for ((d, &c), b) in pp.donors.iter().zip(&pp.counts).zip(&binomials) {
                let k = match b {
                    Some(b) => b.sample(&mut rng),
                    None => c,
                };
                if k > 0 {
                    num[d.domain] += k as f64 * d.y_star / d.pi;
                    den[d.domain] += k as f64 / d.pi;
                }
            }
            (0..m)
                .map(|j| {
                    (den[j] > 0.0).then(|| ReplicateValue {
                        value: domain_sizes[j] * num[j] / den[j],
                        fallback: false,
                    })
                })
                .collect()
        })
        .collect();
    let mut out = transpose(per_rep);
    out.resize(
        m,
        DomainReplicates {
            missing: replicates,
            ..Default::default()
        },
    );
    Ok(out)
}

/// Write replicate values as `domain,replicate,value`.
pub fn write_replicates<W: Write>(domains: &[String], reps: &[DomainReplicates], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["domain", "replicate", "value"])?;
    for (name, d) in domains.iter().zip(reps) {
        for (r, v) in d.index.iter().zip(&d.values) {
            w.write_record([name.as_str(), &r.to_string(), &v.to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io("replicates", e))?;
    Ok(())
}
