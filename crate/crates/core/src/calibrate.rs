//! Domain-level model calibration and the MC estimator.
//!
//! Within domain m the chi-square calibration problem separates into the
//! units missing from the non-probability source (δ = 0), which are scaled
//! to the known count `N_m − N_Bm`, and the covered units (δ = 1), which are
//! calibrated to both the count `N_Bm` and the predicted total `T̂_m`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::direct::{DirectEstimator, DomainEstimate, DomainLayout, Estimator, Provenance};
use crate::error::{Error, Result};
use crate::frame::{PopulationFrame, ProbabilitySample};
use crate::workmodel::Prediction;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationOptions {
    /// Fall back to the direct estimator when any weight is negative.
    pub nonnegative: bool,
    /// Minimum number of δ = 0 units with positive baseline weight.
    pub min_missing: usize,
    /// Minimum number of δ = 1 units with positive baseline weight.
    pub min_big_data: usize,
    /// Largest accepted condition number of the Jacobi-scaled 2×2 system.
    pub max_condition: f64,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            nonnegative: false,
            min_missing: 1,
            min_big_data: 2,
            max_condition: 1e12,
        }
    }
}

/// One sampled unit of the domain: baseline weight and, for units in the
/// non-probability source, the working-model prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalRow {
    pub d: f64,
    pub y_hat: Option<f64>,
}

impl CalRow {
    pub fn delta(&self) -> bool {
        self.y_hat.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FallbackReason {
    NoMissingUnits,
    TooFewBigDataUnits,
    ConstantPrediction,
    IllConditioned,
    NegativeWeights,
}

impl fmt::Display for FallbackReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FallbackReason::NoMissingUnits => "no_missing_units",
            FallbackReason::TooFewBigDataUnits => "too_few_big_data_units",
            FallbackReason::ConstantPrediction => "constant_prediction",
            FallbackReason::IllConditioned => "ill_conditioned",
            FallbackReason::NegativeWeights => "negative_weights",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CalibrationStatus {
    Solved,
    FallbackDirect(FallbackReason),
}

impl CalibrationStatus {
    pub fn is_solved(self) -> bool {
        self == CalibrationStatus::Solved
    }
}

impl fmt::Display for CalibrationStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CalibrationStatus::Solved => f.write_str("solved"),
            CalibrationStatus::FallbackDirect(r) => write!(f, "fallback_direct:{r}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CalibrationDiagnostics {
    pub negative_weights: usize,
    pub min_weight: f64,
    /// Largest `w_i / d_i` over units with `d_i > 0`.
    pub max_weight_ratio: f64,
    pub condition: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationResult {
    /// Aligned with the input rows; empty when the solve fell back.
    pub weights: Vec<f64>,
    pub status: CalibrationStatus,
    pub diagnostics: CalibrationDiagnostics,
}

impl CalibrationResult {
    fn fallback(reason: FallbackReason, condition: f64) -> Self {
        Self {
            weights: Vec::new(),
            status: CalibrationStatus::FallbackDirect(reason),
            diagnostics: CalibrationDiagnostics {
                condition,
                ..Default::default()
            },
        }
    }
}

/// Minimum chi-square distance weights for one domain.
///
/// `n_m` and `n_bm` are the known domain and covered-domain sizes; `t_hat`
/// is the sum of predictions over the covered part of the domain.
pub fn calibrate_domain(
    rows: &[CalRow],
    n_m: f64,
    n_bm: f64,
    t_hat: f64,
    opts: &CalibrationOptions,
) -> CalibrationResult {
    let missing: Vec<&CalRow> = rows.iter().filter(|r| !r.delta() && r.d > 0.0).collect();
    let covered: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.d > 0.0)
        .filter_map(|r| r.y_hat.map(|y| (r.d, y)))
        .collect();
    if missing.len() < opts.min_missing.max(1) || !(n_m > n_bm) {
        return CalibrationResult::fallback(FallbackReason::NoMissingUnits, f64::NAN);
    }
    if covered.len() < opts.min_big_data.max(2) {
        return CalibrationResult::fallback(FallbackReason::TooFewBigDataUnits, f64::NAN);
    }

    let s0: f64 = covered.iter().map(|(d, _)| d).sum();
    let s1: f64 = covered.iter().map(|(d, y)| d * y).sum();
    let mean = s1 / s0;
    let spread: f64 = covered.iter().map(|(d, y)| d * (y - mean).powi(2)).sum();
    let s2: f64 = covered.iter().map(|(d, y)| d * y * y).sum();
    if !(spread > 0.0) {
        return CalibrationResult::fallback(FallbackReason::ConstantPrediction, f64::INFINITY);
    }
    // Jacobi scaling leaves unit diagonals and off-diagonal r; the
    // eigenvalues are 1 ± r.
    let r = (s1.abs() / (s0 * s2).sqrt()).min(1.0);
    let condition = if r < 1.0 { (1.0 + r) / (1.0 - r) } else { f64::INFINITY };
    if !(condition <= opts.max_condition) {
        return CalibrationResult::fallback(FallbackReason::IllConditioned, condition);
    }
    // Solve [[s0, s1], [s1, s2]] λ = (N_B − s0, T − s1) in centred form.
    let lambda2 = ((t_hat - s1) - mean * (n_bm - s0)) / spread;
    let lambda1 = (n_bm - s0) / s0 - mean * lambda2;

    let missing_d: f64 = missing.iter().map(|r| r.d).sum();
    let ratio = (n_m - n_bm) / missing_d;
    let weights: Vec<f64> = rows
        .iter()
        .map(|r| match r.y_hat {
            None => r.d * ratio,
            Some(y) => r.d * (1.0 + lambda1 + lambda2 * y),
        })
        .collect();

    let negative = weights.iter().filter(|&&w| w < 0.0).count();
    let diagnostics = CalibrationDiagnostics {
        negative_weights: negative,
        min_weight: weights.iter().copied().fold(f64::INFINITY, f64::min),
        max_weight_ratio: rows
            .iter()
            .zip(&weights)
            .filter(|(r, _)| r.d > 0.0)
            .map(|(r, w)| w / r.d)
            .fold(f64::NEG_INFINITY, f64::max),
        condition,
    };
    if opts.nonnegative && negative > 0 {
        return CalibrationResult {
            weights: Vec::new(),
            status: CalibrationStatus::FallbackDirect(FallbackReason::NegativeWeights),
            diagnostics,
        };
    }
    CalibrationResult {
        weights,
        status: CalibrationStatus::Solved,
        diagnostics,
    }
}

/// `Σ w_i y_i` for a solved calibration; `None` after a fallback.
pub fn mc_value(result: &CalibrationResult, y: &[f64]) -> Option<f64> {
    result
        .status
        .is_solved()
        .then(|| result.weights.iter().zip(y).map(|(w, y)| w * y).sum())
}

/// The MC estimate for one domain, or the supplied direct estimate tagged
/// as a fallback.
pub fn mc_total(result: &CalibrationResult, y: &[f64], direct: &DomainEstimate) -> DomainEstimate {
    match mc_value(result, y) {
        Some(v) => DomainEstimate::new(&direct.domain, Estimator::Mc, v, direct.n_m, Provenance::Calibrated),
        None => DomainEstimate::new(
            &direct.domain,
            Estimator::Mc,
            direct.value,
            direct.n_m,
            Provenance::FallbackDirect(direct.estimator),
        ),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McValue {
    pub value: f64,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct DomainTargets {
    n_m: f64,
    n_bm: f64,
    t_hat: f64,
}

/// MC estimator over all domains under arbitrary baseline weights, with the
/// working-model predictions held fixed.
#[derive(Debug, Clone)]
pub struct McEstimator {
    pub direct: DirectEstimator,
    pub opts: CalibrationOptions,
    y: Vec<f64>,
    y_hat: Vec<Option<f64>>,
    targets: Vec<DomainTargets>,
}

impl McEstimator {
    pub fn new(
        frame: &PopulationFrame,
        sample: &ProbabilitySample,
        predictions: &[Prediction],
        direct: DirectEstimator,
        opts: CalibrationOptions,
    ) -> Result<Self> {
        let mut by_unit = vec![None; frame.units().len()];
        for p in predictions {
            if !p.y_hat.is_finite() {
                return Err(Error::Fit(format!("non-finite prediction for unit {}", p.unit_id)));
            }
            by_unit[p.unit] = Some(p.y_hat);
        }
        if let Some(u) = frame
            .units()
            .iter()
            .zip(&by_unit)
            .find(|(u, p)| u.delta() && p.is_none())
        {
            return Err(Error::Parameter(format!(
                "no prediction for covered unit {}",
                u.0.unit_id
            )));
        }
        let layout = &direct.layout;
        let mut targets: Vec<DomainTargets> = layout
            .domains
            .iter()
            .map(|info| DomainTargets {
                n_m: info.population as f64,
                n_bm: frame.big_data_domain_size(&info.domain) as f64,
                t_hat: 0.0,
            })
            .collect();
        for (u, p) in frame.units().iter().zip(&by_unit) {
            if let Some(y) = p {
                let i = layout.position(&u.domain).expect("frame domain");
                targets[i].t_hat += y;
            }
        }
        Ok(Self {
            y: sample.rows().iter().map(|r| r.y).collect(),
            y_hat: sample.rows().iter().map(|r| by_unit[r.unit]).collect(),
            targets,
            direct,
            opts,
        })
    }

    pub fn layout(&self) -> &DomainLayout {
        &self.direct.layout
    }

    /// `T̂_m`, the predicted total over the covered part of each domain.
    pub fn predicted_total(&self, i: usize) -> f64 {
        self.targets[i].t_hat
    }

    pub fn calibrate(&self, i: usize, weights: &[f64]) -> CalibrationResult {
        let info = &self.layout().domains[i];
        let rows: Vec<CalRow> = info
            .rows
            .iter()
            .map(|&k| CalRow {
                d: weights[k],
                y_hat: self.y_hat[k],
            })
            .collect();
        let t = self.targets[i];
        calibrate_domain(&rows, t.n_m, t.n_bm, t.t_hat, &self.opts)
    }

    /// Per-domain calibration results under the given baseline weights.
    pub fn calibrate_all(&self, weights: &[f64]) -> Vec<CalibrationResult> {
        (0..self.layout().domains.len())
            .map(|i| self.calibrate(i, weights))
            .collect()
    }

    /// One entry per domain in layout order; `None` for domains without
    /// sampled units or where the fallback direct estimator is undefined.
    pub fn evaluate(&self, weights: &[f64]) -> Vec<Option<McValue>> {
        let mut direct: Option<Vec<_>> = None;
        (0..self.layout().domains.len())
            .map(|i| {
                let info = &self.layout().domains[i];
                if info.rows.is_empty() {
                    return None;
                }
                let res = self.calibrate(i, weights);
                if res.status.is_solved() {
                    let y: Vec<f64> = info.rows.iter().map(|&k| self.y[k]).collect();
                    return mc_value(&res, &y).map(|value| McValue {
                        value,
                        provenance: Provenance::Calibrated,
                    });
                }
                let dv = direct.get_or_insert_with(|| self.direct.evaluate(weights))[i]?;
                let used = if dv.fallback {
                    Estimator::Ht
                } else {
                    self.direct.kind.estimator()
                };
                Some(McValue {
                    value: dv.value,
                    provenance: Provenance::FallbackDirect(used),
                })
            })
            .collect()
    }

    /// MC point estimates and calibration results at the design weights.
    pub fn estimates(&self, sample: &ProbabilitySample) -> (Vec<DomainEstimate>, Vec<(String, CalibrationResult)>) {
        let w = sample.weights();
        let values = self.evaluate(&w);
        let results = self.calibrate_all(&w);
        let mut out = Vec::new();
        let mut cal = Vec::new();
        for ((info, v), res) in self.layout().domains.iter().zip(values).zip(results) {
            if let Some(v) = v {
                if !res.status.is_solved() {
                    log::warn!("calibration fell back in domain {} ({})", info.domain, res.status);
                }
                out.push(DomainEstimate::new(
                    &info.domain,
                    Estimator::Mc,
                    v.value,
                    info.rows.len(),
                    v.provenance,
                ));
                cal.push((info.domain.clone(), res));
            }
        }
        (out, cal)
    }
}
