//! RRMSE quality classes and cross-domain summaries.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use crate::direct::{DomainEstimate, Estimator};
use crate::error::{Error, Result};
use crate::stats;

/// RRMSE strictly below this is "good".
pub const GOOD_BELOW: f64 = 0.167;
/// RRMSE up to and including this is "sufficient".
pub const SUFFICIENT_UP_TO: f64 = 0.333;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Quality {
    Good,
    Sufficient,
    Unreliable,
}

impl fmt::Display for Quality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Quality::Good => "good",
            Quality::Sufficient => "sufficient",
            Quality::Unreliable => "unreliable",
        })
    }
}

impl FromStr for Quality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "good" => Ok(Quality::Good),
            "sufficient" => Ok(Quality::Sufficient),
            "unreliable" => Ok(Quality::Unreliable),
            _ => Err(Error::Parameter(format!("unknown quality class {s:?}"))),
        }
    }
}

pub fn classify_rrmse(rrmse: f64) -> Quality {
    if rrmse < GOOD_BELOW {
        Quality::Good
    } else if rrmse <= SUFFICIENT_UP_TO {
        Quality::Sufficient
    } else {
        Quality::Unreliable
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct QualityCounts {
    pub good: f64,
    pub sufficient: f64,
    pub unreliable: f64,
    pub unclassified: f64,
}

impl QualityCounts {
    pub fn classified(&self) -> f64 {
        self.good + self.sufficient + self.unreliable
    }
}

/// Quality class counts per estimator, averaged over periods.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct QualityTable {
    pub rows: BTreeMap<Estimator, QualityCounts>,
    pub periods: usize,
}

pub fn classify<'a, I>(estimates: I) -> QualityTable
where
    I: IntoIterator<Item = (&'a str, &'a DomainEstimate)>,
{
    let mut periods = BTreeSet::new();
    let mut rows: BTreeMap<Estimator, QualityCounts> = BTreeMap::new();
    for (period, e) in estimates {
        periods.insert(period);
        let c = rows.entry(e.estimator).or_default();
        match e.rrmse.map(classify_rrmse) {
            Some(Quality::Good) => c.good += 1.0,
            Some(Quality::Sufficient) => c.sufficient += 1.0,
            Some(Quality::Unreliable) => c.unreliable += 1.0,
            None => c.unclassified += 1.0,
        }
    }
    let t = periods.len().max(1) as f64;
    for c in rows.values_mut() {
        c.good /= t;
        c.sufficient /= t;
        c.unreliable /= t;
        c.unclassified /= t;
    }
    QualityTable {
        rows,
        periods: periods.len(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quantiles {
    pub median: f64,
    pub p75: f64,
    pub p90: f64,
}

/// Per-estimator RRMSE quantiles: computed within each period, then averaged
/// across periods.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct QuantileSummary {
    pub rows: BTreeMap<Estimator, Quantiles>,
}

pub fn quantile_summary<'a, I>(estimates: I) -> QuantileSummary
where
    I: IntoIterator<Item = (&'a str, &'a DomainEstimate)>,
{
    let mut groups: BTreeMap<Estimator, BTreeMap<&str, Vec<f64>>> = BTreeMap::new();
    for (period, e) in estimates {
        let g = groups.entry(e.estimator).or_default().entry(period).or_default();
        if let Some(r) = e.rrmse {
            g.push(r);
        }
    }
    let mut rows = BTreeMap::new();
    for (est, periods) in groups {
        let per_period: Vec<Quantiles> = periods
            .iter()
            .filter_map(|(period, v)| {
                if v.is_empty() {
                    log::warn!("no RRMSE values for {est} in period {period}; omitted from quantile summary");
                    return None;
                }
                Some(Quantiles {
                    median: stats::quantile(v, 0.5)?,
                    p75: stats::quantile(v, 0.75)?,
                    p90: stats::quantile(v, 0.9)?,
                })
            })
            .collect();
        if per_period.is_empty() {
            continue;
        }
        let t = per_period.len() as f64;
        rows.insert(
            est,
            Quantiles {
                median: per_period.iter().map(|q| q.median).sum::<f64>() / t,
                p75: per_period.iter().map(|q| q.p75).sum::<f64>() / t,
                p90: per_period.iter().map(|q| q.p90).sum::<f64>() / t,
            },
        );
    }
    QuantileSummary { rows }
}

pub fn write_quality<W: Write>(table: &QualityTable, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["estimator", "good", "sufficient", "unreliable", "unclassified"])?;
    for (est, c) in &table.rows {
        w.write_record([
            est.tag().to_string(),
            c.good.to_string(),
            c.sufficient.to_string(),
            c.unreliable.to_string(),
            c.unclassified.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("quality.csv", e))?;
    Ok(())
}

pub fn write_quantiles<W: Write>(summary: &QuantileSummary, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["estimator", "median", "p75", "p90"])?;
    for (est, q) in &summary.rows {
        w.write_record([
            est.tag().to_string(),
            q.median.to_string(),
            q.p75.to_string(),
            q.p90.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("quantiles.csv", e))?;
    Ok(())
}

/// Long-format `period,domain,estimator,rrmse` for plotting.
pub fn write_rrmse_long<'a, W, I>(estimates: I, out: W) -> Result<()>
where
    W: Write,
    I: IntoIterator<Item = (&'a str, &'a DomainEstimate)>,
{
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["period", "domain", "estimator", "rrmse"])?;
    for (period, e) in estimates {
        if let Some(r) = e.rrmse {
            w.write_record([period, &e.domain, e.estimator.tag(), &r.to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io("rrmse_by_domain.csv", e))?;
    Ok(())
}
