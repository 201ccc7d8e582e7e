//! Design-based properties of the direct estimators and the sampler.

use std::collections::BTreeMap;

use mcsae::direct::{DirectEstimator, DirectKind};
use mcsae::frame::{PopulationFrame, StratumDesign, UnitRecord};
use mcsae::sim;
use proptest::prelude::*;

fn frame(strata: &[&str], x: &[f64]) -> PopulationFrame {
    let units = strata
        .iter()
        .zip(x)
        .enumerate()
        .map(|(i, (h, &x))| UnitRecord {
            unit_id: format!("u{i:03}"),
            domain: "m".into(),
            stratum: (*h).into(),
            x: vec![x],
            y_star: None,
        })
        .collect();
    PopulationFrame::new(units, vec!["x1".into()]).unwrap()
}

fn design(pairs: &[(&str, usize, usize)]) -> BTreeMap<String, StratumDesign> {
    pairs
        .iter()
        .map(|&(h, population, sample)| (h.to_string(), StratumDesign { population, sample }))
        .collect()
}

fn value(f: &PopulationFrame, s: &mcsae::ProbabilitySample, kind: DirectKind) -> f64 {
    let est = DirectEstimator::new(f, s, kind, &[0]).unwrap();
    est.evaluate(&s.weights())[0].unwrap().value
}

#[test]
fn hajek_monte_carlo_mean_of_srswor() {
    let f = frame(&["h"; 6], &[0.0; 6]);
    let y: Vec<f64> = (1..=6).map(f64::from).collect();
    let des = design(&[("h", 6, 3)]);
    let draws = 100_000;
    let mean = (0..draws)
        .map(|r| value(&f, &sim::draw_sample(&f, &des, &y, r).unwrap(), DirectKind::Hajek))
        .sum::<f64>()
        / draws as f64;
    assert!((mean - 21.0).abs() / 21.0 < 0.01, "mean {mean}");
}

#[test]
fn greg_enumeration_mean_is_close_to_total() {
    let x = [1.0, 2.5, 3.0, 4.5, 6.0, 7.0];
    let noise = [0.3, -0.4, 0.1, 0.5, -0.2, -0.3];
    let y: Vec<f64> = x.iter().zip(noise).map(|(x, e)| 3.0 + x + e).collect();
    let f = frame(&["h"; 6], &x);
    let des = design(&[("h", 6, 3)]);
    let truth: f64 = y.iter().sum();
    let mean: f64 = sim::enumerate_designs(&f, &des)
        .unwrap()
        .map(|(units, p)| p * value(&f, &sim::sample_of(&f, &units, &y, &des).unwrap(), DirectKind::Greg))
        .sum();
    assert!((mean - truth).abs() / truth < 0.02, "mean {mean} vs {truth}");
}

#[test]
fn inclusion_frequencies_match_design() {
    let strata = ["a", "a", "a", "a", "b", "b", "b", "b", "b", "c", "c"];
    let f = frame(&strata, &[0.0; 11]);
    let des = design(&[("a", 4, 1), ("b", 5, 3), ("c", 2, 2)]);
    let y = vec![1.0; 11];
    let draws = 100_000u64;
    let mut hits = [0u32; 11];
    for r in 0..draws {
        for row in sim::draw_sample(&f, &des, &y, r).unwrap().rows() {
            hits[row.unit] += 1;
        }
    }
    for (i, &h) in hits.iter().enumerate() {
        let sd = des[strata[i]];
        let pi = sd.sample as f64 / sd.population as f64;
        let freq = f64::from(h) / draws as f64;
        assert!((freq - pi).abs() / pi < 0.01, "unit {i}: {freq} vs {pi}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Every direct estimator reproduces the total of a census.
    #[test]
    fn census_reproduces_total(y in prop::collection::vec(-50.0f64..50.0, 2..12)) {
        let n = y.len();
        let x: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let f = frame(&vec!["h"; n], &x);
        let des = design(&[("h", n, n)]);
        let units: Vec<usize> = (0..n).collect();
        let s = sim::sample_of(&f, &units, &y, &des).unwrap();
        let truth: f64 = y.iter().sum();
        for kind in [DirectKind::Ht, DirectKind::Hajek, DirectKind::Greg] {
            let v = value(&f, &s, kind);
            prop_assert!((v - truth).abs() <= 1e-9 * (1.0 + truth.abs()), "{kind:?}: {v} vs {truth}");
        }
    }

    /// HT is linear in y; Hájek is invariant to a rescaling of all weights.
    #[test]
    fn ht_linear_and_hajek_scale_free(
        y in prop::collection::vec(0.0f64..100.0, 8),
        a in -3.0f64..3.0,
        c in 0.1f64..10.0,
        seed in 0u64..1000,
    ) {
        let f = frame(&["h"; 8], &[0.0; 8]);
        let des = design(&[("h", 8, 4)]);
        let s = sim::draw_sample(&f, &des, &y, seed).unwrap();
        let ay: Vec<f64> = y.iter().map(|v| a * v).collect();
        let s2 = sim::draw_sample(&f, &des, &ay, seed).unwrap();
        let (v, av) = (value(&f, &s, DirectKind::Ht), value(&f, &s2, DirectKind::Ht));
        prop_assert!((av - a * v).abs() <= 1e-9 * (1.0 + v.abs()));

        let est = DirectEstimator::new(&f, &s, DirectKind::Hajek, &[]).unwrap();
        let w = s.weights();
        let scaled: Vec<f64> = w.iter().map(|w| c * w).collect();
        let (h1, h2) = (est.evaluate(&w)[0].unwrap().value, est.evaluate(&scaled)[0].unwrap().value);
        prop_assert!((h1 - h2).abs() <= 1e-9 * (1.0 + h1.abs()));
    }
}
