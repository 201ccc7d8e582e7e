//! Working models checked against independent computations.

use mcsae::frame::{LinkedOverlap, OverlapRow};
use mcsae::rng;
use mcsae::workmodel::{self, KnnWeighting, WorkingModel};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};

fn row(i: usize, y: f64, y_star: f64, x: f64) -> OverlapRow {
    OverlapRow {
        unit_id: format!("u{i:04}"),
        y,
        y_star,
        x: vec![x],
        d: 1.0,
        domain: "m".into(),
    }
}

fn inv_logit(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

#[test]
fn linear_coefficients_within_three_standard_errors() {
    let truth = [1.0, 0.5, 0.9];
    let sigma = 0.5;
    let noise = Normal::new(0.0, sigma).unwrap();
    for seed in 0..20 {
        let mut rng = rng::stream(seed, "test-ols", 0);
        let rows: Vec<OverlapRow> = (0..20)
            .map(|i| {
                let x = rng.random_range(0.0..10.0);
                let ys = rng.random_range(0.0..10.0);
                row(
                    i,
                    truth[0] + truth[1] * x + truth[2] * ys + noise.sample(&mut rng),
                    ys,
                    x,
                )
            })
            .collect();
        let overlap = LinkedOverlap { rows };
        let WorkingModel::Linear { coef } = workmodel::fit_linear(&overlap).unwrap() else {
            panic!("linear fit expected");
        };
        // Closed-form OLS: (X'X)^-1 X'y with s² = RSS / (n − 3).
        let x = DMatrix::from_fn(20, 3, |i, j| match j {
            0 => 1.0,
            1 => overlap.rows[i].x[0],
            _ => overlap.rows[i].y_star,
        });
        let y = DVector::from_iterator(20, overlap.rows.iter().map(|r| r.y));
        let xtx_inv = (x.transpose() * &x).try_inverse().unwrap();
        let beta = &xtx_inv * x.transpose() * &y;
        let resid = &y - &x * &beta;
        let s2 = resid.norm_squared() / 17.0;
        for j in 0..3 {
            assert!(
                (coef[j] - beta[j]).abs() < 1e-9,
                "coefficient {j} differs from the closed form"
            );
            let se = (s2 * xtx_inv[(j, j)]).sqrt();
            assert!(
                (coef[j] - truth[j]).abs() < 3.0 * se + 1e-12,
                "seed {seed}, coefficient {j}"
            );
        }
    }
}

fn hurdle_overlap(n: usize, seed: u64) -> LinkedOverlap {
    let mut rng = rng::stream(seed, "test-hurdle", 0);
    let noise = Normal::new(0.0, 0.5).unwrap();
    let rows = (0..n)
        .map(|i| {
            let ys = rng.random_range(0.0..20.0);
            let x = rng.random_range(0.0..1.0);
            let positive = rng.random::<f64>() < inv_logit(-1.0 + 0.1 * ys);
            let y = if positive {
                2.0 + ys + noise.sample(&mut rng)
            } else {
                0.0
            };
            row(i, y, ys, x)
        })
        .collect();
    LinkedOverlap { rows }
}

#[test]
fn hurdle_mean_matches_generating_law() {
    let overlap = hurdle_overlap(4000, 1);
    let model = workmodel::fit_hurdle(&overlap).unwrap();
    let (mut fitted, mut truth) = (0.0, 0.0);
    for r in &overlap.rows {
        fitted += model.predict(r.y_star, &r.x);
        truth += inv_logit(-1.0 + 0.1 * r.y_star) * (2.0 + r.y_star);
    }
    assert!((fitted - truth).abs() / truth < 0.05, "fitted {fitted} vs {truth}");
}

#[test]
fn hurdle_rowwise_recomputation() {
    let overlap = hurdle_overlap(300, 2);
    let model = workmodel::fit_hurdle(&overlap).unwrap();
    let WorkingModel::Hurdle {
        logit_coef,
        linear_coef,
    } = &model
    else {
        panic!("hurdle fit expected");
    };
    let lin = |c: &[f64], r: &OverlapRow| c[0] + c[1] * r.x[0] + c[2] * r.y_star;
    let max_mean = overlap
        .rows
        .iter()
        .map(|r| lin(linear_coef, r).max(0.0))
        .fold(0.0, f64::max);
    for r in &overlap.rows {
        let y_hat = model.predict(r.y_star, &r.x);
        let expected = inv_logit(lin(logit_coef, r)) * lin(linear_coef, r).max(0.0);
        assert!((y_hat - expected).abs() <= 1e-12 * (1.0 + expected.abs()));
        assert!((0.0..=max_mean).contains(&y_hat), "{y_hat} outside [0, {max_mean}]");
    }
}

/// Exhaustive scan over the overlap on features `(y*, x)` scaled by their
/// sample standard deviations; ties go to the smaller unit id.
fn brute_force_knn(overlap: &LinkedOverlap, k: usize, q: &[f64]) -> f64 {
    let feats: Vec<Vec<f64>> = overlap
        .rows
        .iter()
        .map(|r| std::iter::once(r.y_star).chain(r.x.iter().copied()).collect())
        .collect();
    let n = feats.len() as f64;
    let sd: Vec<f64> = (0..q.len())
        .map(|j| {
            let m = feats.iter().map(|f| f[j]).sum::<f64>() / n;
            (feats.iter().map(|f| (f[j] - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        })
        .collect();
    let mut ids: Vec<usize> = (0..feats.len()).collect();
    ids.sort_by(|&a, &b| overlap.rows[a].unit_id.cmp(&overlap.rows[b].unit_id));
    let dist = |i: usize| -> f64 {
        feats[i]
            .iter()
            .zip(q)
            .zip(&sd)
            .map(|((a, b), s)| ((a - b) / s).powi(2))
            .sum()
    };
    let mut chosen: Vec<usize> = Vec::new();
    for _ in 0..k {
        let best = ids
            .iter()
            .copied()
            .filter(|i| !chosen.contains(i))
            .fold(None, |best: Option<usize>, i| match best {
                Some(b) if dist(b) <= dist(i) => Some(b),
                _ => Some(i),
            })
            .unwrap();
        chosen.push(best);
    }
    chosen.iter().map(|&i| overlap.rows[i].y).sum::<f64>() / k as f64
}

#[test]
fn knn_matches_exhaustive_scan() {
    let mut rng = rng::stream(3, "test-knn", 0);
    let rows: Vec<OverlapRow> = (0..50)
        .map(|i| {
            // Coarse grid values so that ties occur.
            let ys = f64::from(rng.random_range(0..8u8));
            let x = f64::from(rng.random_range(0..5u8)) * 10.0;
            row(i, ys + rng.random_range(0.0..1.0), ys, x)
        })
        .collect();
    let overlap = LinkedOverlap { rows };
    for k in [1, 3, 5] {
        let model = workmodel::fit_knn(&overlap, k, KnnWeighting::Uniform).unwrap();
        for _ in 0..100 {
            let q = [rng.random_range(-1.0..9.0), rng.random_range(-5.0..45.0)];
            let got = model.predict(q[0], &q[1..]);
            let want = brute_force_knn(&overlap, k, &q);
            assert!((got - want).abs() < 1e-12, "k={k}, query {q:?}: {got} vs {want}");
        }
    }
}

#[test]
fn separated_hurdle_falls_back_to_linear() {
    // Zeros exactly where y* = 0.
    let rows: Vec<OverlapRow> = (0..40)
        .map(|i| {
            let ys = if i % 4 == 0 { 0.0 } else { 1.0 + i as f64 };
            row(i, if ys == 0.0 { 0.0 } else { ys * 1.1 }, ys, (i % 7) as f64)
        })
        .collect();
    let overlap = LinkedOverlap { rows };
    assert!(workmodel::fit(mcsae::ModelSpec::Hurdle, &overlap).is_err());
    let model = workmodel::fit_or_linear(mcsae::ModelSpec::Hurdle, &overlap).unwrap();
    assert_eq!(model.variant(), "linear");
}
