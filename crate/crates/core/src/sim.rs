//! Synthetic business populations, stratified samples and exhaustive
//! design enumeration.
//!
//! A population has `M` domains of random size. Each unit carries a log-size
//! auxiliary `x1` and a uniform `x2`; strata are size classes cut at global
//! quantiles of `x1`. The study variable, its proxy, and the coverage of the
//! proxy source follow the laws in [`SimConfig`]. Three presets mimic the
//! business-statistics settings the estimators are meant for.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Binomial, Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::direct::DirectKind;
use crate::error::{Error, Result};
use crate::frame::{PopulationFrame, ProbabilitySample, StratumDesign, UnitRecord};
use crate::logistic::inv_logit;
use crate::rng::{self, StreamRng};
use crate::stats;
use crate::workmodel::{KnnWeighting, ModelSpec};

/// Largest design space [`enumerate_designs`] will walk.
pub const ENUMERATION_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Closely aligned multiplicative proxy, MAR coverage, |B|/|A| ≈ 6.
    Turnover,
    /// Zero-inflated response, cut-off coverage of the largest units,
    /// |B|/|A| ≈ 1.
    Investment,
    /// Sparse counts with a count proxy, coverage driven by the proxy itself,
    /// |B|/|A| ≈ 2.
    Vacancy,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Turnover, Preset::Investment, Preset::Vacancy];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Turnover => "turnover",
            Preset::Investment => "investment",
            Preset::Vacancy => "vacancy",
        }
    }

    /// Direct estimator paired with the preset.
    pub fn direct(self) -> DirectKind {
        match self {
            Preset::Turnover => DirectKind::Greg,
            Preset::Investment => DirectKind::Ht,
            Preset::Vacancy => DirectKind::Hajek,
        }
    }

    /// Working model paired with the preset.
    pub fn model(self) -> ModelSpec {
        match self {
            Preset::Turnover => ModelSpec::Linear,
            Preset::Investment => ModelSpec::Hurdle,
            Preset::Vacancy => ModelSpec::Knn {
                k: 5,
                weighting: KnnWeighting::Uniform,
            },
        }
    }

    /// Default propensity covariates. Cut-off coverage is a deterministic
    /// function of `x1`, which would separate membership perfectly.
    pub fn propensity_covariates(self) -> Option<Vec<String>> {
        match self {
            Preset::Investment => Some(vec!["x2".into()]),
            _ => None,
        }
    }

    pub fn config(self) -> SimConfig {
        let base = SimConfig {
            domains: 40,
            domain_size_min: 80,
            domain_size_max: 250,
            domain_effect_sd: 0.3,
            stratum_cuts: vec![0.4, 0.7, 0.9],
            sampling_fractions: vec![0.04, 0.08, 0.2, 0.5],
            response: ResponseLaw::LogLinear {
                intercept: 1.0,
                slope_x1: 1.0,
                slope_x2: 0.5,
                noise_sd: 0.5,
            },
            proxy: ProxyLaw::Multiplicative { noise_sd: 0.05 },
            coverage: Coverage::MarLogistic { slope: 1.0 },
            big_data_ratio: 6.0,
        };
        match self {
            Preset::Turnover => base,
            Preset::Investment => SimConfig {
                response: ResponseLaw::Hurdle {
                    logit_intercept: 0.5,
                    logit_slope: 0.65,
                    intercept: 0.5,
                    slope_x1: 0.8,
                    noise_sd: 0.8,
                },
                proxy: ProxyLaw::ZeroInflated {
                    noise_sd: 0.3,
                    miss_rate: 0.1,
                    false_positive_rate: 0.1,
                },
                coverage: Coverage::Cutoff,
                big_data_ratio: 1.0,
                ..base
            },
            Preset::Vacancy => SimConfig {
                response: ResponseLaw::PoissonMixture {
                    intercept: -1.0,
                    slope_x1: 0.6,
                    mixing_sd: 0.5,
                },
                proxy: ProxyLaw::Counts {
                    detection: 0.95,
                    spurious: 0.05,
                },
                coverage: Coverage::ProxyLogistic { slope: 1.0 },
                big_data_ratio: 2.0,
                ..base
            },
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown simulation preset {s:?}")))
    }
}

/// Law of the study variable. `a_m` is the domain effect.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum ResponseLaw {
    /// `log y = intercept + slope_x1 x1 + slope_x2 x2 + a_m + ε`.
    LogLinear {
        intercept: f64,
        slope_x1: f64,
        slope_x2: f64,
        noise_sd: f64,
    },
    /// `P(y > 0) = logit⁻¹(logit_intercept + logit_slope (x1 − 2) + a_m)`,
    /// positive values log-linear in `x1`.
    Hurdle {
        logit_intercept: f64,
        logit_slope: f64,
        intercept: f64,
        slope_x1: f64,
        noise_sd: f64,
    },
    /// Poisson counts with log-normal mixing:
    /// `log λ = intercept + slope_x1 x1 + a_m + η`.
    PoissonMixture {
        intercept: f64,
        slope_x1: f64,
        mixing_sd: f64,
    },
}

/// Law of the proxy given the study variable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum ProxyLaw {
    /// `y* = y exp(N(0, noise_sd²))`.
    Multiplicative { noise_sd: f64 },
    /// Multiplicative noise, plus positive values reported as zero with
    /// `miss_rate` and zeros reported as the latent positive value with
    /// `false_positive_rate`.
    ZeroInflated {
        noise_sd: f64,
        miss_rate: f64,
        false_positive_rate: f64,
    },
    /// Each of the `y` events is detected with probability `detection`,
    /// plus `Poisson(spurious)` false reports.
    Counts { detection: f64, spurious: f64 },
}

/// Which units the proxy source covers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mechanism", rename_all = "snake_case")]
pub enum Coverage {
    All,
    /// `P(δ = 1) = logit⁻¹(α + slope x1)`, missing at random given `x1`.
    MarLogistic {
        slope: f64,
    },
    /// The units with the largest `x1`.
    Cutoff,
    /// `P(δ = 1) = logit⁻¹(α + slope ln(1 + y*))`, not missing at random.
    ProxyLogistic {
        slope: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub domains: usize,
    pub domain_size_min: usize,
    pub domain_size_max: usize,
    pub domain_effect_sd: f64,
    /// Quantiles of `x1` separating the size-class strata.
    pub stratum_cuts: Vec<f64>,
    /// Sampling fraction per stratum, smallest size class first.
    pub sampling_fractions: Vec<f64>,
    pub response: ResponseLaw,
    pub proxy: ProxyLaw,
    pub coverage: Coverage,
    /// Target `|B| / |A|`; the coverage intercept or cut-off is chosen to
    /// hit it in expectation.
    pub big_data_ratio: f64,
}

impl SimConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.domains == 0 || self.domain_size_min == 0 || self.domain_size_min > self.domain_size_max {
            return bad("domain count and size range must be positive with min <= max");
        }
        if self.sampling_fractions.len() != self.stratum_cuts.len() + 1 {
            return bad("need one sampling fraction per stratum (cuts + 1)");
        }
        if !self.stratum_cuts.windows(2).all(|w| w[0] < w[1])
            || self.stratum_cuts.iter().any(|&c| !(c > 0.0 && c < 1.0))
        {
            return bad("stratum cuts must be increasing quantiles in (0, 1)");
        }
        if self.sampling_fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
            return bad("sampling fractions must lie in (0, 1]");
        }
        if !(self.big_data_ratio > 0.0) || !(self.domain_effect_sd >= 0.0) {
            return bad("big-data ratio must be positive and the domain effect sd nonnegative");
        }
        let unit = |p: f64| (0.0..=1.0).contains(&p);
        let proxy_ok = match self.proxy {
            ProxyLaw::Multiplicative { noise_sd } => noise_sd >= 0.0,
            ProxyLaw::ZeroInflated {
                noise_sd,
                miss_rate,
                false_positive_rate,
            } => noise_sd >= 0.0 && unit(miss_rate) && unit(false_positive_rate),
            ProxyLaw::Counts { detection, spurious } => unit(detection) && spurious >= 0.0 && spurious.is_finite(),
        };
        if !proxy_ok {
            return bad("proxy noise must be nonnegative and rates must lie in [0, 1]");
        }
        if let ProxyLaw::Counts { .. } = self.proxy {
            if !matches!(self.response, ResponseLaw::PoissonMixture { .. }) {
                return bad("the counts proxy needs the Poisson-mixture response");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimTruth {
    pub domains: Vec<String>,
    pub t_true: Vec<f64>,
    pub t_star_true: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SimPopulation {
    pub config: SimConfig,
    pub frame: PopulationFrame,
    /// Study variable for every frame unit.
    pub y: Vec<f64>,
    /// Proxy value for every frame unit, covered or not.
    pub y_star_full: Vec<f64>,
    pub design: BTreeMap<String, StratumDesign>,
    pub truth: SimTruth,
    /// Area covariate `z1 = ln Σ_{U_m} exp(x1)` per domain.
    pub covariates: BTreeMap<String, Vec<f64>>,
    /// Coverage `(intercept, slope)` for the logistic mechanisms.
    pub coverage_coef: Option<(f64, f64)>,
}

fn normal(rng: &mut StreamRng) -> f64 {
    Normal::new(0.0, 1.0).expect("unit normal").sample(rng)
}

fn bernoulli(rng: &mut StreamRng, p: f64) -> bool {
    rng.random::<f64>() < p
}

/// Intercept α with `Σ logit⁻¹(α + slope s_i) = target`.
fn solve_intercept(scores: &[f64], slope: f64, target: f64) -> f64 {
    let expected = |a: f64| scores.iter().map(|s| inv_logit(a + slope * s)).sum::<f64>();
    let (mut lo, mut hi) = (-60.0, 60.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if expected(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

pub fn generate_population(config: &SimConfig, seed: u64) -> Result<SimPopulation> {
    config.validate()?;
    let m = config.domains;
    let width = m.to_string().len().max(2);
    let domains: Vec<String> = (1..=m).map(|i| format!("d{i:0width$}")).collect();

    let mut rng = rng::stream(seed, "sim-sizes", 0);
    let sizes: Vec<usize> = (0..m)
        .map(|_| rng.random_range(config.domain_size_min..=config.domain_size_max))
        .collect();
    let n_total: usize = sizes.iter().sum();

    let mut rng = rng::stream(seed, "sim-effects", 0);
    let shift: Vec<f64> = (0..m).map(|_| 0.3 * normal(&mut rng)).collect();
    let effect: Vec<f64> = (0..m).map(|_| config.domain_effect_sd * normal(&mut rng)).collect();

    let mut rng = rng::stream(seed, "sim-x", 0);
    let mut dom = Vec::with_capacity(n_total);
    let mut x = Vec::with_capacity(n_total);
    for (j, &size) in sizes.iter().enumerate() {
        for _ in 0..size {
            dom.push(j);
            let x1 = 2.0 + shift[j] + 0.8 * normal(&mut rng);
            let x2 = rng.random::<f64>();
            x.push([x1, x2]);
        }
    }

    let x1: Vec<f64> = x.iter().map(|r| r[0]).collect();
    let cuts: Vec<f64> = config
        .stratum_cuts
        .iter()
        .map(|&q| stats::quantile(&x1, q).expect("nonempty"))
        .collect();
    let stratum: Vec<usize> = x1.iter().map(|v| cuts.iter().filter(|&&c| *v >= c).count()).collect();

    let mut rng = rng::stream(seed, "sim-response", 0);
    let mut latent = Vec::with_capacity(n_total);
    let mut y = Vec::with_capacity(n_total);
    for i in 0..n_total {
        let (x1, x2, a) = (x[i][0], x[i][1], effect[dom[i]]);
        match config.response {
            ResponseLaw::LogLinear {
                intercept,
                slope_x1,
                slope_x2,
                noise_sd,
            } => {
                let v = (intercept + slope_x1 * x1 + slope_x2 * x2 + a + noise_sd * normal(&mut rng)).exp();
                latent.push(v);
                y.push(v);
            }
            ResponseLaw::Hurdle {
                logit_intercept,
                logit_slope,
                intercept,
                slope_x1,
                noise_sd,
            } => {
                let pos = bernoulli(&mut rng, inv_logit(logit_intercept + logit_slope * (x1 - 2.0) + a));
                let v = (intercept + slope_x1 * x1 + a + noise_sd * normal(&mut rng)).exp();
                latent.push(v);
                y.push(if pos { v } else { 0.0 });
            }
            ResponseLaw::PoissonMixture {
                intercept,
                slope_x1,
                mixing_sd,
            } => {
                let lambda = (intercept + slope_x1 * x1 + a + mixing_sd * normal(&mut rng)).exp();
                let v = Poisson::new(lambda).expect("positive rate").sample(&mut rng);
                latent.push(v);
                y.push(v);
            }
        }
    }

    let mut rng = rng::stream(seed, "sim-proxy", 0);
    let y_star_full: Vec<f64> = (0..n_total)
        .map(|i| match config.proxy {
            ProxyLaw::Multiplicative { noise_sd } => y[i] * (noise_sd * normal(&mut rng)).exp(),
            ProxyLaw::ZeroInflated {
                noise_sd,
                miss_rate,
                false_positive_rate,
            } => {
                let e = (noise_sd * normal(&mut rng)).exp();
                let u = rng.random::<f64>();
                if y[i] > 0.0 {
                    if u < miss_rate {
                        0.0
                    } else {
                        y[i] * e
                    }
                } else if u < false_positive_rate {
                    latent[i] * e
                } else {
                    0.0
                }
            }
            ProxyLaw::Counts { detection, spurious } => {
                let hits = Binomial::new(y[i] as u64, detection)
                    .expect("valid binomial")
                    .sample(&mut rng) as f64;
                let noise = if spurious > 0.0 {
                    Poisson::new(spurious).expect("positive rate").sample(&mut rng)
                } else {
                    0.0
                };
                hits + noise
            }
        })
        .collect();

    let n_strata = config.sampling_fractions.len();
    let mut stratum_sizes = vec![0usize; n_strata];
    for &h in &stratum {
        stratum_sizes[h] += 1;
    }
    let stratum_labels: Vec<String> = (1..=n_strata).map(|h| format!("h{h}")).collect();
    let mut design = BTreeMap::new();
    let mut n_sample = 0;
    for h in 0..n_strata {
        let big = stratum_sizes[h];
        if big < 2 {
            return Err(Error::Config(format!(
                "stratum {} has {big} units; at least 2 are needed",
                stratum_labels[h]
            )));
        }
        let small = ((config.sampling_fractions[h] * big as f64).round() as usize).clamp(2, big);
        n_sample += small;
        design.insert(
            stratum_labels[h].clone(),
            StratumDesign {
                population: big,
                sample: small,
            },
        );
    }

    let target = config.big_data_ratio * n_sample as f64;
    if matches!(config.coverage, Coverage::All) {
        // Full coverage ignores the ratio.
    } else if target >= n_total as f64 {
        return Err(Error::Config(format!(
            "|B| / |A| = {} needs {target:.0} covered units but the population has {n_total}",
            config.big_data_ratio
        )));
    }
    let mut rng = rng::stream(seed, "sim-coverage", 0);
    let (delta, coverage_coef): (Vec<bool>, Option<(f64, f64)>) = match config.coverage {
        Coverage::All => (vec![true; n_total], None),
        Coverage::MarLogistic { slope } => {
            let a = solve_intercept(&x1, slope, target);
            let d = x1
                .iter()
                .map(|s| bernoulli(&mut rng, inv_logit(a + slope * s)))
                .collect();
            (d, Some((a, slope)))
        }
        Coverage::ProxyLogistic { slope } => {
            let scores: Vec<f64> = y_star_full.iter().map(|v| v.max(0.0).ln_1p()).collect();
            let a = solve_intercept(&scores, slope, target);
            let d = scores
                .iter()
                .map(|s| bernoulli(&mut rng, inv_logit(a + slope * s)))
                .collect();
            (d, Some((a, slope)))
        }
        Coverage::Cutoff => {
            let k = target.round() as usize;
            let mut order: Vec<usize> = (0..n_total).collect();
            order.sort_by(|&a, &b| x1[b].total_cmp(&x1[a]).then(a.cmp(&b)));
            let mut d = vec![false; n_total];
            for &i in &order[..k] {
                d[i] = true;
            }
            (d, None)
        }
    };

    let width_u = n_total.to_string().len().max(5);
    let units: Vec<UnitRecord> = (0..n_total)
        .map(|i| UnitRecord {
            unit_id: format!("u{:0width_u$}", i + 1),
            domain: domains[dom[i]].clone(),
            stratum: stratum_labels[stratum[i]].clone(),
            x: x[i].to_vec(),
            y_star: delta[i].then_some(y_star_full[i]),
        })
        .collect();
    let frame = PopulationFrame::new(units, vec!["x1".into(), "x2".into()])?;

    let mut t_true = vec![0.0; m];
    let mut t_star_true = vec![0.0; m];
    let mut size_total = vec![0.0; m];
    for i in 0..n_total {
        t_true[dom[i]] += y[i];
        t_star_true[dom[i]] += y_star_full[i];
        size_total[dom[i]] += x1[i].exp();
    }
    let covariates = domains
        .iter()
        .zip(&size_total)
        .map(|(d, s)| (d.clone(), vec![s.ln()]))
        .collect();

    Ok(SimPopulation {
        config: config.clone(),
        frame,
        y,
        y_star_full,
        design,
        truth: SimTruth {
            domains,
            t_true,
            t_star_true,
        },
        covariates,
        coverage_coef,
    })
}

/// Stratified simple random sampling without replacement. Strata with
/// `n_h = 0` are left out of the sample.
pub fn draw_sample(
    frame: &PopulationFrame,
    design: &BTreeMap<String, StratumDesign>,
    y: &[f64],
    seed: u64,
) -> Result<ProbabilitySample> {
    let mut by_stratum: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, u) in frame.units().iter().enumerate() {
        by_stratum.entry(u.stratum.as_str()).or_default().push(i);
    }
    let mut rng = rng::stream(seed, "sample", 0);
    let mut entries = Vec::new();
    for (h, sd) in design {
        let units = by_stratum.get(h.as_str()).map_or(&[][..], Vec::as_slice);
        if sd.sample > units.len() {
            return Err(Error::Design(format!(
                "stratum {h:?}: cannot draw {} of {} units",
                sd.sample,
                units.len()
            )));
        }
        let mut picks = index::sample(&mut rng, units.len(), sd.sample).into_vec();
        picks.sort_unstable();
        entries.extend(picks.into_iter().map(|k| (units[k], y[units[k]], None)));
    }
    let design = design
        .iter()
        .filter(|(_, sd)| sd.sample > 0)
        .map(|(h, sd)| (h.clone(), *sd))
        .collect();
    ProbabilitySample::new(frame, entries, Some(design))
}

impl SimPopulation {
    pub fn draw_sample(&self, seed: u64) -> Result<ProbabilitySample> {
        draw_sample(&self.frame, &self.design, &self.y, seed)
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..k).collect();
    loop {
        out.push(cur.clone());
        let Some(i) = (0..k).rev().find(|&i| cur[i] < n - k + i) else {
            return out;
        };
        cur[i] += 1;
        for j in i + 1..k {
            cur[j] = cur[j - 1] + 1;
        }
    }
}

/// Every stratified SRSWOR sample as `(frame positions, probability)`.
pub struct DesignEnumeration {
    strata: Vec<Vec<Vec<usize>>>,
    counter: Vec<usize>,
    probability: f64,
    done: bool,
    len: usize,
}

impl DesignEnumeration {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

impl Iterator for DesignEnumeration {
    type Item = (Vec<usize>, f64);

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let units: Vec<usize> = self
            .strata
            .iter()
            .zip(&self.counter)
            .flat_map(|(combos, &c)| combos[c].iter().copied())
            .collect();
        // Advance the mixed-radix counter.
        self.done = true;
        for (c, combos) in self.counter.iter_mut().zip(&self.strata) {
            *c += 1;
            if *c < combos.len() {
                self.done = false;
                break;
            }
            *c = 0;
        }
        Some((units, self.probability))
    }
}

pub fn enumerate_designs(
    frame: &PopulationFrame,
    design: &BTreeMap<String, StratumDesign>,
) -> Result<DesignEnumeration> {
    let mut by_stratum: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, u) in frame.units().iter().enumerate() {
        by_stratum.entry(u.stratum.as_str()).or_default().push(i);
    }
    let mut space = 1.0;
    for (h, sd) in design {
        let n_h = by_stratum.get(h.as_str()).map_or(0, Vec::len);
        if sd.sample > n_h {
            return Err(Error::Design(format!(
                "stratum {h:?}: n_h = {} exceeds N_h = {n_h}",
                sd.sample
            )));
        }
        space *= binomial(n_h, sd.sample);
    }
    if space > ENUMERATION_LIMIT {
        return Err(Error::Guard(format!(
            "design space has {space:.3e} samples, above the limit of {ENUMERATION_LIMIT:e}"
        )));
    }
    let strata: Vec<Vec<Vec<usize>>> = design
        .iter()
        .map(|(h, sd)| {
            let units = by_stratum.get(h.as_str()).cloned().unwrap_or_default();
            combinations(units.len(), sd.sample)
                .into_iter()
                .map(|c| c.into_iter().map(|k| units[k]).collect())
                .collect()
        })
        .collect();
    let len = strata.iter().map(Vec::len).product();
    Ok(DesignEnumeration {
        counter: vec![0; strata.len()],
        strata,
        probability: 1.0 / len as f64,
        done: len == 0,
        len,
    })
}

/// Build the sample for a set of frame positions.
pub fn sample_of(
    frame: &PopulationFrame,
    units: &[usize],
    y: &[f64],
    design: &BTreeMap<String, StratumDesign>,
) -> Result<ProbabilitySample> {
    let entries = units.iter().map(|&i| (i, y[i], None)).collect();
    let design = design
        .iter()
        .filter(|(_, sd)| sd.sample > 0)
        .map(|(h, sd)| (h.clone(), *sd))
        .collect();
    ProbabilitySample::new(frame, entries, Some(design))
}

/// `domain,t_true,t_star_true`.
pub fn write_truth<W: Write>(truth: &SimTruth, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["domain", "t_true", "t_star_true"])?;
    for i in 0..truth.domains.len() {
        w.write_record([
            truth.domains[i].as_str(),
            &truth.t_true[i].to_string(),
            &truth.t_star_true[i].to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("truth.csv", e))?;
    Ok(())
}

pub fn read_truth<R: Read>(reader: R) -> Result<SimTruth> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut truth = SimTruth {
        domains: Vec::new(),
        t_true: Vec::new(),
        t_star_true: Vec::new(),
    };
    for rec in rdr.deserialize::<(String, f64, f64)>() {
        let (d, t, ts) = rec?;
        truth.domains.push(d);
        truth.t_true.push(t);
        truth.t_star_true.push(ts);
    }
    Ok(truth)
}

/// `unit_id,y,y_star_full`: the hidden register behind the simulation.
pub fn write_register<W: Write>(pop: &SimPopulation, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["unit_id", "y", "y_star_full"])?;
    for (i, u) in pop.frame.units().iter().enumerate() {
        w.write_record([
            u.unit_id.as_str(),
            &pop.y[i].to_string(),
            &pop.y_star_full[i].to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("register.csv", e))?;
    Ok(())
}

/// `domain,z1[,z2,...]`, without the intercept.
pub fn write_covariates<W: Write>(covariates: &BTreeMap<String, Vec<f64>>, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let q = covariates.values().next().map_or(0, Vec::len);
    let mut header = vec!["domain".to_string()];
    header.extend((1..=q).map(|j| format!("z{j}")));
    w.write_record(&header)?;
    for (d, z) in covariates {
        let mut rec = vec![d.clone()];
        rec.extend(z.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("covariates.csv", e))?;
    Ok(())
}

pub fn read_covariates<R: Read>(reader: R) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.get(0) != Some("domain") {
        return Err(Error::Schema("covariate file must start with a domain column".into()));
    }
    let mut out = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let d = rec[0].to_string();
        let z = rec
            .iter()
            .skip(1)
            .map(|v| {
                v.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| Error::Schema(format!("domain {d:?}: covariate {v:?} is not a finite number")))
            })
            .collect::<Result<Vec<_>>>()?;
        if out.insert(d.clone(), z).is_some() {
            return Err(Error::Integrity(format!("domain {d:?} listed twice in covariates")));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(coverage: Coverage, proxy: ProxyLaw) -> SimConfig {
        SimConfig {
            domains: 4,
            domain_size_min: 30,
            domain_size_max: 40,
            coverage,
            proxy,
            big_data_ratio: 2.0,
            ..Preset::Turnover.config()
        }
    }

    #[test]
    fn perfect_proxy_and_full_coverage() {
        let pop = generate_population(&small(Coverage::All, ProxyLaw::Multiplicative { noise_sd: 0.0 }), 3).unwrap();
        assert_eq!(pop.frame.big_data_size(), pop.frame.total_size());
        assert_eq!(pop.y, pop.y_star_full);
        assert!(pop.frame.units().iter().zip(&pop.y).all(|(u, y)| u.y_star == Some(*y)));
    }

    #[test]
    fn truth_matches_population() {
        let pop = generate_population(&Preset::Vacancy.config(), 5).unwrap();
        for (j, d) in pop.truth.domains.iter().enumerate() {
            let t: f64 = pop
                .frame
                .units()
                .iter()
                .zip(&pop.y)
                .filter(|(u, _)| &u.domain == d)
                .map(|(_, y)| y)
                .sum();
            assert_eq!(t, pop.truth.t_true[j]);
        }
    }

    #[test]
    fn same_seed_same_population() {
        let a = generate_population(&Preset::Investment.config(), 9).unwrap();
        let b = generate_population(&Preset::Investment.config(), 9).unwrap();
        assert_eq!(a.frame.units(), b.frame.units());
        assert_eq!(a.y, b.y);
        let c = generate_population(&Preset::Investment.config(), 10).unwrap();
        assert_ne!(a.y, c.y);
    }

    #[test]
    fn presets_hit_their_ratios() {
        for preset in Preset::ALL {
            let pop = generate_population(&preset.config(), 1).unwrap();
            let n: usize = pop.design.values().map(|s| s.sample).sum();
            let ratio = pop.frame.big_data_size() as f64 / n as f64;
            let target = preset.config().big_data_ratio;
            assert!((ratio / target - 1.0).abs() < 0.1, "{preset:?}: {ratio}");
        }
    }

    #[test]
    fn enumeration_counts() {
        let pop = generate_population(
            &SimConfig {
                domains: 1,
                domain_size_min: 6,
                domain_size_max: 6,
                stratum_cuts: vec![],
                sampling_fractions: vec![0.5],
                ..small(Coverage::All, ProxyLaw::Multiplicative { noise_sd: 0.0 })
            },
            1,
        )
        .unwrap();
        let e = enumerate_designs(&pop.frame, &pop.design).unwrap();
        assert_eq!(e.len(), 20);
        let all: Vec<_> = e.collect();
        assert_eq!(all.len(), 20);
        assert!((all.iter().map(|(_, p)| p).sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(all.iter().all(|(u, p)| u.len() == 3 && *p == 1.0 / 20.0));
    }

    #[test]
    fn enumeration_guard() {
        let pop = generate_population(&Preset::Turnover.config(), 1).unwrap();
        assert!(matches!(
            enumerate_designs(&pop.frame, &pop.design),
            Err(Error::Guard(_))
        ));
    }

    #[test]
    fn census_stratum_and_weights() {
        let pop = generate_population(&small(Coverage::All, ProxyLaw::Multiplicative { noise_sd: 0.1 }), 2).unwrap();
        let mut design = pop.design.clone();
        let (h, sd) = design.iter_mut().next().unwrap();
        sd.sample = sd.population;
        let h = h.clone();
        let s = draw_sample(&pop.frame, &design, &pop.y, 4).unwrap();
        let in_h = s.rows().iter().filter(|r| r.stratum == h).count();
        assert_eq!(in_h, design[&h].population);
        for r in s.rows() {
            let sd = design[&r.stratum];
            assert_eq!(r.d, sd.population as f64 / sd.sample as f64);
        }
    }

    #[test]
    fn files_round_trip() {
        let pop = generate_population(&Preset::Turnover.config(), 1).unwrap();
        let mut buf = Vec::new();
        write_truth(&pop.truth, &mut buf).unwrap();
        assert_eq!(read_truth(buf.as_slice()).unwrap(), pop.truth);
        let mut buf = Vec::new();
        write_covariates(&pop.covariates, &mut buf).unwrap();
        assert_eq!(read_covariates(buf.as_slice()).unwrap(), pop.covariates);
    }
}
