//! Working models ĝ(y*, x) linking the proxy value to the study variable.
//!
//! Models are fitted on the linked overlap A ∩ B and used to predict ŷ for
//! every unit of the non-probability source. Linear and hurdle models use
//! the regressor order `(1, x_1..x_p, y*)`.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{LinkedOverlap, OverlapRow, PopulationFrame};
use crate::linalg;
use crate::logistic::{self, LogisticOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnnWeighting {
    #[default]
    Uniform,
    InverseDistance,
}

/// Which working model to fit, with its hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum ModelSpec {
    #[default]
    Linear,
    Hurdle,
    Knn {
        #[serde(default = "default_k")]
        k: usize,
        #[serde(default)]
        weighting: KnnWeighting,
    },
}

fn default_k() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnnPoint {
    pub unit_id: String,
    /// Standardised `(y*, x_1..x_p)`.
    pub features: Vec<f64>,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnnModel {
    pub k: usize,
    pub weighting: KnnWeighting,
    /// Per-feature divisor, strictly positive.
    pub scale: Vec<f64>,
    /// Sorted by unit_id so that equal distances resolve to the smallest id.
    pub points: Vec<KnnPoint>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum WorkingModel {
    Linear {
        coef: Vec<f64>,
    },
    Hurdle {
        logit_coef: Vec<f64>,
        linear_coef: Vec<f64>,
    },
    Knn(KnnModel),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub unit_id: String,
    /// Frame position of the unit.
    pub unit: usize,
    pub y_hat: f64,
}

fn regressors(row: &OverlapRow) -> Vec<f64> {
    let mut r = row.x.clone();
    r.push(row.y_star);
    r
}

fn linear_value(coef: &[f64], x: &[f64], y_star: f64) -> f64 {
    coef[0] + coef[1..=x.len()].iter().zip(x).map(|(c, v)| c * v).sum::<f64>() + coef[x.len() + 1] * y_star
}

fn ols(rows: &[&OverlapRow]) -> Result<Vec<f64>> {
    let regs: Vec<Vec<f64>> = rows.iter().map(|r| regressors(r)).collect();
    let k = regs.first().map_or(0, Vec::len);
    let design = linalg::design_matrix(regs.iter().map(Vec::as_slice), k, true);
    let y: Vec<f64> = rows.iter().map(|r| r.y).collect();
    linalg::weighted_least_squares(&design, &y, None)
        .map(|b| b.iter().copied().collect())
        .ok_or_else(|| Error::SingularFit("working-model design (1, x, y*) is rank deficient".into()))
}

/// Ordinary least squares of y on `(1, x, y*)`.
pub fn fit_linear(overlap: &LinkedOverlap) -> Result<WorkingModel> {
    let p = overlap.rows.first().map_or(0, |r| r.x.len());
    if overlap.len() < p + 2 {
        return Err(Error::SingularFit(format!(
            "linear working model needs at least {} overlap rows, found {}",
            p + 2,
            overlap.len()
        )));
    }
    let rows: Vec<&OverlapRow> = overlap.rows.iter().collect();
    Ok(WorkingModel::Linear { coef: ols(&rows)? })
}

/// Two-part model: logistic `P(y > 0 | x, y*)` on the full overlap times an
/// OLS conditional mean fitted on the positive rows.
pub fn fit_hurdle(overlap: &LinkedOverlap) -> Result<WorkingModel> {
    let positive: Vec<&OverlapRow> = overlap.rows.iter().filter(|r| r.y > 0.0).collect();
    if positive.is_empty() || positive.len() == overlap.len() {
        return Err(Error::Degenerate(format!(
            "hurdle model needs both zero and positive y in the overlap ({} of {} positive)",
            positive.len(),
            overlap.len()
        )));
    }
    let p = overlap.rows[0].x.len();
    if positive.len() < p + 2 {
        return Err(Error::SingularFit(format!(
            "hurdle positive part needs at least {} rows, found {}",
            p + 2,
            positive.len()
        )));
    }
    let feats: Vec<Vec<f64>> = overlap.rows.iter().map(regressors).collect();
    let feat_refs: Vec<&[f64]> = feats.iter().map(Vec::as_slice).collect();
    let resp: Vec<bool> = overlap.rows.iter().map(|r| r.y > 0.0).collect();
    let logit = logistic::fit_logistic(&feat_refs, &resp, &LogisticOptions::default()).map_err(|e| match e {
        Error::Separation(msg) => Error::Separation(format!(
            "{msg}; the zero/positive split is perfectly predicted, use the linear working model instead"
        )),
        other => other,
    })?;
    Ok(WorkingModel::Hurdle {
        logit_coef: logit.coef,
        linear_coef: ols(&positive)?,
    })
}

/// Nearest-neighbour regression on standardised `(y*, x)`.
pub fn fit_knn(overlap: &LinkedOverlap, k: usize, weighting: KnnWeighting) -> Result<WorkingModel> {
    if k == 0 || k > overlap.len() {
        return Err(Error::Parameter(format!(
            "kNN needs 1 <= k <= overlap size ({}), got k = {k}",
            overlap.len()
        )));
    }
    let raw: Vec<Vec<f64>> = overlap.rows.iter().map(knn_raw).collect();
    let dim = raw[0].len();
    let n = raw.len() as f64;
    let scale: Vec<f64> = (0..dim)
        .map(|j| {
            let m = raw.iter().map(|r| r[j]).sum::<f64>() / n;
            let v = raw.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
            let s = v.sqrt();
            if s > 0.0 && s.is_finite() {
                s
            } else {
                1.0
            }
        })
        .collect();
    let mut points: Vec<KnnPoint> = overlap
        .rows
        .iter()
        .zip(&raw)
        .map(|(r, f)| KnnPoint {
            unit_id: r.unit_id.clone(),
            features: f.iter().zip(&scale).map(|(v, s)| v / s).collect(),
            y: r.y,
        })
        .collect();
    points.sort_by(|a, b| a.unit_id.cmp(&b.unit_id));
    Ok(WorkingModel::Knn(KnnModel {
        k,
        weighting,
        scale,
        points,
    }))
}

fn knn_raw(row: &OverlapRow) -> Vec<f64> {
    std::iter::once(row.y_star).chain(row.x.iter().copied()).collect()
}

pub fn fit(spec: ModelSpec, overlap: &LinkedOverlap) -> Result<WorkingModel> {
    match spec {
        ModelSpec::Linear => fit_linear(overlap),
        ModelSpec::Hurdle => fit_hurdle(overlap),
        ModelSpec::Knn { k, weighting } => fit_knn(overlap, k, weighting),
    }
}

/// Like [`fit`], but a hurdle fit whose logistic part separates falls back
/// to the linear model with a warning. Any other error is returned.
pub fn fit_or_linear(spec: ModelSpec, overlap: &LinkedOverlap) -> Result<WorkingModel> {
    match fit(spec, overlap) {
        Err(Error::Separation(msg)) if matches!(spec, ModelSpec::Hurdle) => {
            log::warn!("hurdle working model not identifiable ({msg}); using the linear model");
            fit_linear(overlap)
        }
        other => other,
    }
}

impl KnnModel {
    pub fn predict(&self, y_star: f64, x: &[f64]) -> f64 {
        let q: Vec<f64> = std::iter::once(y_star)
            .chain(x.iter().copied())
            .zip(&self.scale)
            .map(|(v, s)| v / s)
            .collect();
        let mut dist: Vec<(f64, usize)> = self
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let d2: f64 = p.features.iter().zip(&q).map(|(a, b)| (a - b).powi(2)).sum();
                (d2.sqrt(), i)
            })
            .collect();
        // Points are sorted by unit_id, so the index is the tie-breaker.
        dist.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)));
        let nn = &dist[..self.k];
        match self.weighting {
            KnnWeighting::Uniform => nn.iter().map(|&(_, i)| self.points[i].y).sum::<f64>() / self.k as f64,
            KnnWeighting::InverseDistance => {
                let exact: Vec<usize> = nn.iter().filter(|(d, _)| *d == 0.0).map(|&(_, i)| i).collect();
                if !exact.is_empty() {
                    return exact.iter().map(|&i| self.points[i].y).sum::<f64>() / exact.len() as f64;
                }
                let wsum: f64 = nn.iter().map(|(d, _)| 1.0 / d).sum();
                nn.iter().map(|&(d, i)| self.points[i].y / d).sum::<f64>() / wsum
            }
        }
    }
}

impl WorkingModel {
    pub fn variant(&self) -> &'static str {
        match self {
            WorkingModel::Linear { .. } => "linear",
            WorkingModel::Hurdle { .. } => "hurdle",
            WorkingModel::Knn(_) => "knn",
        }
    }

    /// ĝ(y*, x).
    pub fn predict(&self, y_star: f64, x: &[f64]) -> f64 {
        match self {
            WorkingModel::Linear { coef } => linear_value(coef, x, y_star),
            WorkingModel::Hurdle {
                logit_coef,
                linear_coef,
            } => {
                // The positive part models a mean of positive values.
                let pi = logistic::inv_logit(linear_value(logit_coef, x, y_star));
                pi * linear_value(linear_coef, x, y_star).max(0.0)
            }
            WorkingModel::Knn(m) => m.predict(y_star, x),
        }
    }
}

/// ŷ for every unit of the non-probability source, in frame order.
pub fn predict_all(model: &WorkingModel, frame: &PopulationFrame) -> Vec<Prediction> {
    let units: Vec<usize> = (0..frame.units().len()).filter(|&i| frame.unit(i).delta()).collect();
    units
        .par_iter()
        .map(|&i| {
            let u = frame.unit(i);
            Prediction {
                unit_id: u.unit_id.clone(),
                unit: i,
                y_hat: model.predict(u.y_star.expect("delta = 1"), &u.x),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(id: usize, y: f64, y_star: f64, x: f64) -> OverlapRow {
        OverlapRow {
            unit_id: format!("u{id:03}"),
            y,
            y_star,
            x: vec![x],
            d: 1.0,
            domain: "a".into(),
        }
    }

    fn overlap(rows: Vec<OverlapRow>) -> LinkedOverlap {
        LinkedOverlap { rows }
    }

    #[test]
    fn perfect_proxy_gives_identity() {
        let ov = overlap(
            (0..10)
                .map(|i| row(i, i as f64 * 1.7, i as f64 * 1.7, (i * i) as f64))
                .collect(),
        );
        let WorkingModel::Linear { coef } = fit_linear(&ov).unwrap() else {
            panic!()
        };
        assert!(
            coef[0].abs() < 1e-9 && coef[1].abs() < 1e-9 && (coef[2] - 1.0).abs() < 1e-9,
            "{coef:?}"
        );
    }

    #[test]
    fn constant_response() {
        let ov = overlap((0..10).map(|i| row(i, 4.0, i as f64, (i % 3) as f64)).collect());
        let WorkingModel::Linear { coef } = fit_linear(&ov).unwrap() else {
            panic!()
        };
        assert!((coef[0] - 4.0).abs() < 1e-9 && coef[1].abs() < 1e-9 && coef[2].abs() < 1e-9);
    }

    #[test]
    fn linear_needs_enough_rows_and_rank() {
        let ov = overlap((0..2).map(|i| row(i, 1.0, i as f64, 0.0)).collect());
        assert!(matches!(fit_linear(&ov), Err(Error::SingularFit(_))));
        let ov = overlap((0..6).map(|i| row(i, i as f64, i as f64, 2.0 * i as f64)).collect());
        assert!(matches!(fit_linear(&ov), Err(Error::SingularFit(_))));
    }

    #[test]
    fn hurdle_separation_and_degenerate() {
        let ov = overlap(
            (0..20)
                .map(|i| {
                    let ys = if i < 10 { 0.0 } else { i as f64 };
                    row(i, ys * 1.1, ys, (i % 4) as f64)
                })
                .collect(),
        );
        let err = fit_hurdle(&ov).unwrap_err();
        assert!(matches!(err, Error::Separation(ref m) if m.contains("linear")), "{err}");

        let ov = overlap((0..5).map(|i| row(i, 1.0 + i as f64, i as f64, 0.0)).collect());
        assert!(matches!(fit_hurdle(&ov), Err(Error::Degenerate(_))));
    }

    #[test]
    fn knn_exact_match_and_mean() {
        let ov = overlap(vec![
            row(0, 2.0, 0.0, 0.0),
            row(1, 4.0, 1.0, 0.0),
            row(2, 10.0, 10.0, 0.0),
        ]);
        let m = fit_knn(&ov, 1, KnnWeighting::Uniform).unwrap();
        assert_eq!(m.predict(1.0, &[0.0]), 4.0);
        let m = fit_knn(&ov, 2, KnnWeighting::Uniform).unwrap();
        assert_eq!(m.predict(0.4, &[0.0]), 3.0);
        assert!(matches!(
            fit_knn(&ov, 4, KnnWeighting::Uniform),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn knn_full_k_gives_overlap_mean() {
        let ov = overlap(
            (0..7)
                .map(|i| row(i, i as f64, (i * 3 % 5) as f64, (i % 2) as f64))
                .collect(),
        );
        let m = fit_knn(&ov, 7, KnnWeighting::Uniform).unwrap();
        assert!((m.predict(100.0, &[-3.0]) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn knn_ties_prefer_smallest_unit_id() {
        // Two points equidistant from the query; k = 1 must pick u000.
        let ov = overlap(vec![row(1, 9.0, 2.0, 0.0), row(0, 1.0, 0.0, 0.0)]);
        let m = fit_knn(&ov, 1, KnnWeighting::Uniform).unwrap();
        assert_eq!(m.predict(1.0, &[0.0]), 1.0);
    }

    #[test]
    fn inverse_distance_with_exact_hit() {
        let ov = overlap(vec![
            row(0, 2.0, 0.0, 0.0),
            row(1, 4.0, 1.0, 1.0),
            row(2, 8.0, 3.0, 0.5),
        ]);
        let m = fit_knn(&ov, 3, KnnWeighting::InverseDistance).unwrap();
        assert_eq!(m.predict(0.0, &[0.0]), 2.0);
        let v = m.predict(0.5, &[0.4]);
        assert!(v > 2.0 && v < 8.0);
    }
}
