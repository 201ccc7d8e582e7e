//! Design-based direct domain estimators: Horvitz–Thompson, Hájek and GREG.
//!
//! Every estimator is available in two forms. The domain-level operations
//! (`ht_total`, `hajek_total`, `greg_total`) read the design weights of the
//! sample. [`DirectEstimator`] evaluates all domains at once under an
//! arbitrary weight vector, which is what the bootstrap needs.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{PopulationFrame, ProbabilitySample};
use crate::linalg;
use crate::report::Quality;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Estimator {
    #[serde(rename = "HT")]
    Ht,
    #[serde(rename = "H")]
    Hajek,
    #[serde(rename = "GREG")]
    Greg,
    #[serde(rename = "MC")]
    Mc,
    #[serde(rename = "EBLUP")]
    Eblup,
    #[serde(rename = "YL")]
    Yl,
}

impl Estimator {
    pub const ALL: [Estimator; 6] = [
        Estimator::Ht,
        Estimator::Hajek,
        Estimator::Greg,
        Estimator::Mc,
        Estimator::Eblup,
        Estimator::Yl,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Estimator::Ht => "HT",
            Estimator::Hajek => "H",
            Estimator::Greg => "GREG",
            Estimator::Mc => "MC",
            Estimator::Eblup => "EBLUP",
            Estimator::Yl => "YL",
        }
    }

    pub fn is_direct(self) -> bool {
        matches!(self, Estimator::Ht | Estimator::Hajek | Estimator::Greg)
    }

    /// Model-based estimators report MSE, design-based ones a variance.
    pub fn is_model_based(self) -> bool {
        matches!(self, Estimator::Eblup | Estimator::Yl)
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Estimator::ALL
            .into_iter()
            .find(|e| e.tag().eq_ignore_ascii_case(s))
            .or(match s.to_ascii_lowercase().as_str() {
                "hajek" => Some(Estimator::Hajek),
                _ => None,
            })
            .ok_or_else(|| Error::Parameter(format!("unknown estimator {s:?}")))
    }
}

/// Where a reported value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Direct,
    Calibrated,
    Model,
    /// The requested estimator was unavailable; the named direct estimator
    /// was substituted.
    FallbackDirect(Estimator),
    /// A model-based estimator could not be fitted for the domain; its input
    /// estimate is reported instead.
    FallbackInput(Estimator),
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Direct => f.write_str("direct"),
            Provenance::Calibrated => f.write_str("calibrated"),
            Provenance::Model => f.write_str("model"),
            Provenance::FallbackDirect(e) => write!(f, "fallback_direct:{e}"),
            Provenance::FallbackInput(e) => write!(f, "fallback_input:{e}"),
        }
    }
}

impl FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(Provenance::Direct),
            "calibrated" => Ok(Provenance::Calibrated),
            "model" => Ok(Provenance::Model),
            _ => {
                if let Some(e) = s.strip_prefix("fallback_direct:") {
                    Ok(Provenance::FallbackDirect(e.parse()?))
                } else if let Some(e) = s.strip_prefix("fallback_input:") {
                    Ok(Provenance::FallbackInput(e.parse()?))
                } else {
                    Err(Error::Parameter(format!("unknown provenance {s:?}")))
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainEstimate {
    pub domain: String,
    pub estimator: Estimator,
    pub value: f64,
    pub variance: Option<f64>,
    pub log_variance: Option<f64>,
    pub mse: Option<f64>,
    pub rrmse: Option<f64>,
    pub quality: Option<Quality>,
    pub n_m: usize,
    pub provenance: Provenance,
}

impl DomainEstimate {
    pub fn new(domain: &str, estimator: Estimator, value: f64, n_m: usize, provenance: Provenance) -> Self {
        Self {
            domain: domain.to_string(),
            estimator,
            value,
            variance: None,
            log_variance: None,
            mse: None,
            rrmse: None,
            quality: None,
            n_m,
            provenance,
        }
    }

    /// Mean squared error used for RRMSE: the MSE for model-based
    /// estimators, the variance otherwise.
    pub fn error_measure(&self) -> Option<f64> {
        if self.estimator.is_model_based() {
            self.mse.or(self.variance)
        } else {
            self.variance.or(self.mse)
        }
    }

    /// Fill `rrmse` (and `quality`) from the error measure when the value is
    /// positive.
    pub fn refresh_rrmse(&mut self) {
        self.rrmse = match self.error_measure() {
            Some(m) if self.value > 0.0 && m >= 0.0 => Some(m.sqrt() / self.value),
            _ => None,
        };
        self.quality = self.rrmse.map(crate::report::classify_rrmse);
    }
}

fn domain_rows<'a>(
    sample: &'a ProbabilitySample,
    frame: &'a PopulationFrame,
    domain: &'a str,
) -> impl Iterator<Item = &'a crate::frame::SampleRow> + 'a {
    sample
        .rows()
        .iter()
        .filter(move |r| frame.unit(r.unit).domain == domain)
}

/// Horvitz–Thompson domain total `Σ_{A_m} d_i y_i`.
pub fn ht_total(sample: &ProbabilitySample, frame: &PopulationFrame, domain: &str) -> Result<DomainEstimate> {
    let mut n_m = 0;
    let mut total = 0.0;
    for r in domain_rows(sample, frame, domain) {
        n_m += 1;
        total += r.d * r.y;
    }
    if n_m == 0 {
        return Err(Error::NoData { domain: domain.into() });
    }
    Ok(DomainEstimate::new(
        domain,
        Estimator::Ht,
        total,
        n_m,
        Provenance::Direct,
    ))
}

/// Hájek domain total `(N_m / N̂_m) Σ_{A_m} d_i y_i`.
pub fn hajek_total(sample: &ProbabilitySample, frame: &PopulationFrame, domain: &str) -> Result<DomainEstimate> {
    let mut n_m = 0;
    let (mut wy, mut w) = (0.0, 0.0);
    for r in domain_rows(sample, frame, domain) {
        n_m += 1;
        wy += r.d * r.y;
        w += r.d;
    }
    if n_m == 0 {
        return Err(Error::NoData { domain: domain.into() });
    }
    if !(w > 0.0) {
        return Err(Error::DegenerateWeights { domain: domain.into() });
    }
    let value = frame.domain_size(domain) as f64 / w * wy;
    Ok(DomainEstimate::new(
        domain,
        Estimator::Hajek,
        value,
        n_m,
        Provenance::Direct,
    ))
}

/// GREG domain total with a single design-weighted regression fitted on the
/// whole sample. `covariates` are frame column positions; the intercept is
/// always included. A singular fit falls back to Horvitz–Thompson.
pub fn greg_total(
    sample: &ProbabilitySample,
    frame: &PopulationFrame,
    domain: &str,
    covariates: &[usize],
) -> Result<DomainEstimate> {
    let est = DirectEstimator::new(frame, sample, DirectKind::Greg, covariates)?;
    let i = est
        .layout
        .position(domain)
        .ok_or_else(|| Error::NoData { domain: domain.into() })?;
    let n_m = est.layout.domains[i].rows.len();
    if n_m == 0 {
        return Err(Error::NoData { domain: domain.into() });
    }
    let coef = est.greg_coefficients(&sample.weights());
    let provenance = if coef.is_some() {
        Provenance::Direct
    } else {
        log::warn!("GREG normal equations are singular; domain {domain} uses Horvitz-Thompson");
        Provenance::FallbackDirect(Estimator::Ht)
    };
    let value = est.domain_value(i, &sample.weights(), coef.as_deref()).unwrap_or(0.0);
    Ok(DomainEstimate::new(domain, Estimator::Greg, value, n_m, provenance))
}

/// Per-domain index of sample rows plus known population quantities.
#[derive(Debug, Clone)]
pub struct DomainLayout {
    pub domains: Vec<DomainInfo>,
}

#[derive(Debug, Clone)]
pub struct DomainInfo {
    pub domain: String,
    /// Positions into the sample rows.
    pub rows: Vec<usize>,
    /// `N_m`.
    pub population: usize,
}

impl DomainLayout {
    /// One entry per frame domain, in label order.
    pub fn new(frame: &PopulationFrame, sample: &ProbabilitySample) -> Self {
        let mut domains: Vec<DomainInfo> = frame
            .domain_sizes()
            .iter()
            .map(|(d, &n)| DomainInfo {
                domain: d.clone(),
                rows: Vec::new(),
                population: n,
            })
            .collect();
        for (k, r) in sample.rows().iter().enumerate() {
            let dom = &frame.unit(r.unit).domain;
            let i = domains
                .binary_search_by(|info| info.domain.as_str().cmp(dom))
                .expect("frame domain");
            domains[i].rows.push(k);
        }
        Self { domains }
    }

    pub fn position(&self, domain: &str) -> Option<usize> {
        self.domains
            .binary_search_by(|info| info.domain.as_str().cmp(domain))
            .ok()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DirectKind {
    Ht,
    Hajek,
    Greg,
}

impl DirectKind {
    pub fn estimator(self) -> Estimator {
        match self {
            DirectKind::Ht => Estimator::Ht,
            DirectKind::Hajek => Estimator::Hajek,
            DirectKind::Greg => Estimator::Greg,
        }
    }

    pub fn from_estimator(e: Estimator) -> Option<Self> {
        match e {
            Estimator::Ht => Some(DirectKind::Ht),
            Estimator::Hajek => Some(DirectKind::Hajek),
            Estimator::Greg => Some(DirectKind::Greg),
            _ => None,
        }
    }
}

/// Outcome of a direct estimator in one domain under a given weight vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DirectValue {
    pub value: f64,
    /// GREG fell back to Horvitz–Thompson.
    pub fallback: bool,
}

/// Evaluates a direct estimator for every domain under arbitrary weights.
#[derive(Debug, Clone)]
pub struct DirectEstimator {
    pub kind: DirectKind,
    pub layout: DomainLayout,
    y: Vec<f64>,
    /// GREG regressors per sample row, intercept first.
    regressors: Vec<Vec<f64>>,
    /// GREG population regressor totals per domain, intercept first.
    x_totals: Vec<Vec<f64>>,
}

impl DirectEstimator {
    pub fn new(
        frame: &PopulationFrame,
        sample: &ProbabilitySample,
        kind: DirectKind,
        covariates: &[usize],
    ) -> Result<Self> {
        if let Some(&c) = covariates.iter().find(|&&c| c >= frame.p()) {
            return Err(Error::Parameter(format!("GREG covariate column {c} out of range")));
        }
        let layout = DomainLayout::new(frame, sample);
        let y = sample.rows().iter().map(|r| r.y).collect();
        let (regressors, x_totals) = if kind == DirectKind::Greg {
            let regs = sample
                .rows()
                .iter()
                .map(|r| {
                    let u = frame.unit(r.unit);
                    std::iter::once(1.0).chain(covariates.iter().map(|&c| u.x[c])).collect()
                })
                .collect();
            let mut totals = vec![vec![0.0; covariates.len() + 1]; layout.domains.len()];
            for u in frame.units() {
                let i = layout.position(&u.domain).expect("frame domain");
                totals[i][0] += 1.0;
                for (k, &c) in covariates.iter().enumerate() {
                    totals[i][k + 1] += u.x[c];
                }
            }
            (regs, totals)
        } else {
            (Vec::new(), Vec::new())
        };
        Ok(Self {
            kind,
            layout,
            y,
            regressors,
            x_totals,
        })
    }

    /// Design-weighted least-squares coefficients over the whole sample.
    pub fn greg_coefficients(&self, weights: &[f64]) -> Option<Vec<f64>> {
        let k = self.regressors.first()?.len();
        let x = linalg::design_matrix(self.regressors.iter().map(Vec::as_slice), k, false);
        linalg::weighted_least_squares(&x, &self.y, Some(weights)).map(|b| b.iter().copied().collect())
    }

    fn domain_value(&self, i: usize, weights: &[f64], coef: Option<&[f64]>) -> Option<f64> {
        let info = &self.layout.domains[i];
        let ht = || info.rows.iter().map(|&k| weights[k] * self.y[k]).sum::<f64>();
        match self.kind {
            DirectKind::Ht => Some(ht()),
            DirectKind::Hajek => {
                let w: f64 = info.rows.iter().map(|&k| weights[k]).sum();
                (w > 0.0).then(|| info.population as f64 / w * ht())
            }
            DirectKind::Greg => match coef {
                None => Some(ht()),
                Some(b) => {
                    let synthetic: f64 = self.x_totals[i].iter().zip(b).map(|(t, c)| t * c).sum();
                    let correction: f64 = info
                        .rows
                        .iter()
                        .map(|&k| {
                            let fit: f64 = self.regressors[k].iter().zip(b).map(|(x, c)| x * c).sum();
                            weights[k] * (self.y[k] - fit)
                        })
                        .sum();
                    Some(synthetic + correction)
                }
            },
        }
    }

    /// One entry per domain in layout order; `None` where the estimator is
    /// undefined (no sampled units, or zero weight sum for Hájek).
    pub fn evaluate(&self, weights: &[f64]) -> Vec<Option<DirectValue>> {
        let coef = match self.kind {
            DirectKind::Greg => self.greg_coefficients(weights),
            _ => None,
        };
        let fallback = self.kind == DirectKind::Greg && coef.is_none();
        (0..self.layout.domains.len())
            .map(|i| {
                if self.layout.domains[i].rows.is_empty() {
                    return None;
                }
                self.domain_value(i, weights, coef.as_deref())
                    .map(|value| DirectValue { value, fallback })
            })
            .collect()
    }

    /// Point estimates for every domain with sampled units.
    pub fn estimates(&self, sample: &ProbabilitySample) -> Vec<DomainEstimate> {
        let values = self.evaluate(&sample.weights());
        self.layout
            .domains
            .iter()
            .zip(values)
            .filter_map(|(info, v)| {
                let v = v?;
                let prov = if v.fallback {
                    Provenance::FallbackDirect(Estimator::Ht)
                } else {
                    Provenance::Direct
                };
                Some(DomainEstimate::new(
                    &info.domain,
                    self.kind.estimator(),
                    v.value,
                    info.rows.len(),
                    prov,
                ))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::{read_population, PopulationSchema, UnitRecord};
    use approx::assert_relative_eq;

    fn frame_from(rows: &[(&str, &str, &str, f64)]) -> PopulationFrame {
        let units = rows
            .iter()
            .map(|&(id, dom, h, x)| UnitRecord {
                unit_id: id.into(),
                domain: dom.into(),
                stratum: h.into(),
                x: vec![x],
                y_star: None,
            })
            .collect();
        PopulationFrame::new(units, vec!["x1".into()]).unwrap()
    }

    #[test]
    fn ht_formula() {
        let f = frame_from(&[("a", "m", "h", 1.0), ("b", "m", "h", 2.0), ("c", "m", "h", 3.0)]);
        let s = ProbabilitySample::new(&f, vec![(0, 2.0, Some(5.0)), (1, 3.0, Some(5.0))], None).unwrap();
        assert_eq!(ht_total(&s, &f, "m").unwrap().value, 25.0);
    }

    #[test]
    fn census_identities() {
        let f = frame_from(&[("a", "m", "h", 1.0), ("b", "m", "h", 2.0), ("c", "m", "h", 3.0)]);
        let ys = [6.0, 7.0, 8.0];
        let s = ProbabilitySample::new(&f, (0..3).map(|i| (i, ys[i], None)).collect(), None).unwrap();
        assert!(s.rows().iter().all(|r| r.d == 1.0));
        assert_eq!(ht_total(&s, &f, "m").unwrap().value, 21.0);
        assert_eq!(hajek_total(&s, &f, "m").unwrap().value, 21.0);
        assert_relative_eq!(greg_total(&s, &f, "m", &[0]).unwrap().value, 21.0, epsilon = 1e-12);
    }

    #[test]
    fn hajek_formula() {
        let f = frame_from(&[
            ("a", "m", "h", 1.0),
            ("b", "m", "h", 2.0),
            ("c", "m", "h", 3.0),
            ("d", "m", "h", 4.0),
        ]);
        let s = ProbabilitySample::new(&f, vec![(0, 1.0, Some(2.0)), (1, 3.0, Some(2.0))], None).unwrap();
        assert_eq!(hajek_total(&s, &f, "m").unwrap().value, 8.0);
    }

    #[test]
    fn empty_domain_is_no_data() {
        let f = frame_from(&[("a", "m", "h", 1.0), ("b", "k", "h", 2.0)]);
        let s = ProbabilitySample::new(&f, vec![(0, 1.0, None)], None).unwrap();
        assert!(matches!(ht_total(&s, &f, "k"), Err(Error::NoData { .. })));
        assert!(matches!(hajek_total(&s, &f, "k"), Err(Error::NoData { .. })));
    }

    #[test]
    fn greg_exact_under_perfect_linear_fit() {
        let xs: Vec<f64> = (1..=9).map(|i| (i * i) as f64 / 3.0).collect();
        let rows: Vec<(String, &str, &str, f64)> = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| (format!("u{i}"), if i % 2 == 0 { "a" } else { "b" }, "h", x))
            .collect();
        let f = frame_from(
            &rows
                .iter()
                .map(|(id, d, h, x)| (id.as_str(), *d, *h, *x))
                .collect::<Vec<_>>(),
        );
        for pick in [[0usize, 3, 4, 7], [1, 2, 5, 8], [0, 1, 6, 8]] {
            let s = ProbabilitySample::new(&f, pick.iter().map(|&i| (i, 2.0 * xs[i], None)).collect(), None).unwrap();
            for dom in ["a", "b"] {
                let truth: f64 = (0..9).filter(|&i| f.unit(i).domain == dom).map(|i| 2.0 * xs[i]).sum();
                if s.domain_sample_size(&f, dom) == 0 {
                    continue;
                }
                let g = greg_total(&s, &f, dom, &[0]).unwrap();
                assert_relative_eq!(g.value, truth, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn greg_intercept_only_reduction() {
        let f = frame_from(&[
            ("a", "m", "h", 1.0),
            ("b", "m", "h", 2.0),
            ("c", "k", "h", 3.0),
            ("d", "k", "h", 4.0),
            ("e", "m", "h", 5.0),
        ]);
        let s = ProbabilitySample::new(
            &f,
            vec![(0, 3.0, Some(2.0)), (2, 7.0, Some(3.0)), (4, 1.0, Some(1.5))],
            None,
        )
        .unwrap();
        let ybar = (2.0 * 3.0 + 3.0 * 7.0 + 1.5 * 1.0) / 6.5;
        let expected = 3.0 * ybar + 2.0 * (3.0 - ybar) + 1.5 * (1.0 - ybar);
        assert_relative_eq!(greg_total(&s, &f, "m", &[]).unwrap().value, expected, epsilon = 1e-12);
    }

    #[test]
    fn greg_singular_falls_back_to_ht() {
        let f = frame_from(&[("a", "m", "h", 1.0), ("b", "m", "h", 1.0), ("c", "m", "h", 2.0)]);
        let s = ProbabilitySample::new(&f, vec![(0, 3.0, Some(2.0)), (1, 5.0, Some(2.0))], None).unwrap();
        let g = greg_total(&s, &f, "m", &[0]).unwrap();
        assert_eq!(g.value, 16.0);
        assert_eq!(g.provenance, Provenance::FallbackDirect(Estimator::Ht));
    }

    #[test]
    fn evaluate_matches_domain_operations() {
        let csv = "unit_id,domain,stratum,delta,y_star,x1
u1,a,h1,0,,1
u2,a,h1,0,,2
u3,b,h1,0,,3
u4,b,h2,0,,4
u5,a,h2,0,,5
u6,b,h2,0,,7
";
        let f = read_population(csv.as_bytes(), &PopulationSchema::default()).unwrap();
        let s = ProbabilitySample::new(
            &f,
            vec![(0, 1.5, None), (2, 3.0, None), (3, 4.5, None), (4, 4.0, None)],
            None,
        )
        .unwrap();
        for kind in [DirectKind::Ht, DirectKind::Hajek, DirectKind::Greg] {
            let est = DirectEstimator::new(&f, &s, kind, &[0]).unwrap();
            for e in est.estimates(&s) {
                let single = match kind {
                    DirectKind::Ht => ht_total(&s, &f, &e.domain),
                    DirectKind::Hajek => hajek_total(&s, &f, &e.domain),
                    DirectKind::Greg => greg_total(&s, &f, &e.domain, &[0]),
                }
                .unwrap();
                assert_relative_eq!(e.value, single.value, epsilon = 1e-12);
                assert_eq!(e.n_m, single.n_m);
            }
        }
    }

    #[test]
    fn tags_round_trip() {
        for e in Estimator::ALL {
            assert_eq!(e.tag().parse::<Estimator>().unwrap(), e);
        }
        for p in [
            Provenance::Direct,
            Provenance::FallbackDirect(Estimator::Greg),
            Provenance::FallbackInput(Estimator::Mc),
        ] {
            assert_eq!(p.to_string().parse::<Provenance>().unwrap(), p);
        }
    }
}
