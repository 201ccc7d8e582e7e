//! Propensity, Fay–Herriot and Ybarra–Lohr fits against simulation truth
//! and independent recomputation.

use mcsae::fh::{self, BootstrapMode, FhInput, VarianceMethod};
use mcsae::frame::{PopulationFrame, UnitRecord};
use mcsae::sim::{self, Coverage, Preset, SimConfig};
use mcsae::ylme::{self, YlInput};
use mcsae::{ipw, rng};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};

fn inv_logit(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// Standard errors from the inverse observed information `(X'WX)^-1`.
fn logistic_se(x: &[f64], coef: &[f64]) -> Vec<f64> {
    let mut info = DMatrix::<f64>::zeros(2, 2);
    for &xi in x {
        let p = inv_logit(coef[0] + coef[1] * xi);
        let row = DVector::from_vec(vec![1.0, xi]);
        info += p * (1.0 - p) * &row * row.transpose();
    }
    let cov = info.try_inverse().unwrap();
    vec![cov[(0, 0)].sqrt(), cov[(1, 1)].sqrt()]
}

#[test]
fn propensity_recovers_coefficients() {
    let theta = [-0.5, 0.8];
    for seed in 0..5 {
        let mut rng = rng::stream(seed, "test-propensity", 0);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let x: Vec<f64> = (0..5000).map(|_| normal.sample(&mut rng)).collect();
        let units = x
            .iter()
            .enumerate()
            .map(|(i, &xi)| UnitRecord {
                unit_id: format!("u{i:05}"),
                domain: format!("d{}", i % 10),
                stratum: "h".into(),
                x: vec![xi],
                y_star: (rng.random::<f64>() < inv_logit(theta[0] + theta[1] * xi)).then_some(1.0),
            })
            .collect();
        let frame = PopulationFrame::new(units, vec!["x1".into()]).unwrap();
        let model = ipw::fit_propensity(&frame, &[0]).unwrap();
        let se = logistic_se(&x, &model.coef);
        for j in 0..2 {
            assert!(
                (model.coef[j] - theta[j]).abs() < 3.0 * se[j],
                "seed {seed}: {:?}",
                model.coef
            );
        }
    }
}

#[test]
fn simulated_mar_coverage_round_trips() {
    let cfg = SimConfig {
        coverage: Coverage::MarLogistic { slope: 1.2 },
        ..Preset::Turnover.config()
    };
    for seed in 0..5 {
        let pop = sim::generate_population(&cfg, seed).unwrap();
        let (a, b) = pop.coverage_coef.unwrap();
        let model = ipw::fit_propensity(&pop.frame, &[0]).unwrap();
        let x: Vec<f64> = pop.frame.units().iter().map(|u| u.x[0]).collect();
        let se = logistic_se(&x, &model.coef);
        assert!(
            (model.coef[0] - a).abs() < 3.0 * se[0],
            "seed {seed}: {:?} vs {a}",
            model.coef
        );
        assert!(
            (model.coef[1] - b).abs() < 3.0 * se[1],
            "seed {seed}: {:?} vs {b}",
            model.coef
        );
    }
}

#[test]
fn back_transformed_eblup_is_nearly_unbiased() {
    let m = 30;
    let mut rng = rng::stream(1, "test-fh-bias", 0);
    let z: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..2.0)).collect();
    let psi: Vec<f64> = (0..m).map(|_| rng.random_range(0.02..0.2)).collect();
    let (beta, sigma2) = ([4.0, 0.8], 0.1f64);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let reps = 400;
    let (mut est, mut truth) = (vec![0.0; m], vec![0.0; m]);
    for r in 0..reps {
        let theta: Vec<f64> = (0..m)
            .map(|i| beta[0] + beta[1] * z[i] + sigma2.sqrt() * normal.sample(&mut rng))
            .collect();
        let y: Vec<f64> = (0..m)
            .map(|i| theta[i] + psi[i].sqrt() * normal.sample(&mut rng))
            .collect();
        let input = FhInput::with_intercept(
            (0..m).map(|i| format!("d{i:02}")).collect(),
            y,
            psi.clone(),
            z.iter().map(|&v| vec![v]).collect(),
        );
        let fit = fh::fit_fh(&input, VarianceMethod::Reml).unwrap();
        let mse = fh::fh_mse_parametric_bootstrap(&fit, &input, 100, r, BootstrapMode::Refit).unwrap();
        for i in 0..m {
            est[i] += fh::back_transform(fit.eblup_log[i], mse.mse_log[i]).value;
            truth[i] += theta[i].exp();
        }
    }
    let bias = (0..m).map(|i| est[i] / truth[i] - 1.0).sum::<f64>() / m as f64;
    assert!(bias.abs() <= 0.02, "average relative bias {bias}");
}

struct YlWorld {
    z_true: Vec<f64>,
    c: Vec<f64>,
    psi: Vec<f64>,
    beta: [f64; 2],
    sigma2: f64,
}

impl YlWorld {
    fn new(m: usize) -> Self {
        let mut rng = rng::stream(2, "test-yl-world", 0);
        Self {
            z_true: (0..m).map(|_| rng.random_range(1.0..4.0)).collect(),
            c: (0..m).map(|_| rng.random_range(0.2..0.4)).collect(),
            psi: (0..m).map(|_| rng.random_range(0.03..0.08)).collect(),
            beta: [0.5, 1.0],
            sigma2: 0.05,
        }
    }

    /// One draw: the model input and the true log totals.
    fn draw(&self, rng: &mut impl Rng) -> (YlInput, Vec<f64>) {
        let normal = Normal::new(0.0, 1.0).unwrap();
        let m = self.z_true.len();
        let theta: Vec<f64> = (0..m)
            .map(|i| self.beta[0] + self.beta[1] * self.z_true[i] + self.sigma2.sqrt() * normal.sample(rng))
            .collect();
        let input = YlInput {
            domains: (0..m).map(|i| format!("d{i:02}")).collect(),
            y: (0..m)
                .map(|i| theta[i] + self.psi[i].sqrt() * normal.sample(rng))
                .collect(),
            psi: self.psi.clone(),
            z: vec![vec![1.0]; m],
            z_star: (0..m)
                .map(|i| self.z_true[i] + self.c[i].sqrt() * normal.sample(rng))
                .collect(),
            c: self.c.clone(),
        };
        (input, theta)
    }
}

#[test]
fn measurement_error_correction_reduces_slope_bias() {
    let world = YlWorld::new(40);
    let mut rng = rng::stream(3, "test-yl-bias", 0);
    let (mut corrected, mut naive, mut used) = (0.0, 0.0, 0);
    for _ in 0..200 {
        let (input, _) = world.draw(&mut rng);
        let Ok(yl) = ylme::fit_yl(&input) else { continue };
        let plain = fh::fit_fh(&input.augmented(), VarianceMethod::Reml).unwrap();
        corrected += yl.beta[1];
        naive += plain.beta[1];
        used += 1;
    }
    assert!(used >= 190, "only {used} fits succeeded");
    let (corrected, naive) = (corrected / used as f64, naive / used as f64);
    let truth = world.beta[1];
    assert!(
        (corrected - truth).abs() < (naive - truth).abs(),
        "corrected {corrected}, naive {naive}, truth {truth}"
    );
}

#[test]
fn jackknife_mse_tracks_empirical_mse() {
    let world = YlWorld::new(30);
    let mut rng = rng::stream(4, "test-yl-mse", 0);
    let (mut empirical, mut jackknife, mut used) = (0.0, 0.0, 0);
    for _ in 0..500 {
        let (input, theta) = world.draw(&mut rng);
        let Ok(fit) = ylme::fit_yl(&input) else { continue };
        let mse = ylme::yl_jackknife_mse(&input, &fit).unwrap();
        for ((pred, t), m) in fit.prediction_log.iter().zip(&theta).zip(&mse.mse_log) {
            empirical += (pred - t).powi(2);
            jackknife += m;
        }
        used += 1;
    }
    let ratio = empirical / jackknife;
    assert!(used >= 475, "only {used} fits succeeded");
    assert!((ratio - 1.0).abs() <= 0.25, "empirical / jackknife = {ratio}");
}

#[test]
fn yl_predictions_hand_computed() {
    let input = YlInput {
        domains: vec!["a".into(), "b".into(), "c".into()],
        y: vec![2.0, 3.5, 1.0],
        psi: vec![0.5, 1.0, 0.25],
        z: vec![vec![1.0, 0.0], vec![1.0, 1.0], vec![1.0, 2.0]],
        z_star: vec![1.0, 2.0, 0.5],
        c: vec![0.0, 0.5, 1.0],
    };
    let (beta, s2) = ([0.5, 0.25, 1.0], 0.5);
    // a: synthetic 0.5 + 0 + 1 = 1.5, γ = 0.5 / 1.0 = 0.5 → 1.75
    // b: synthetic 0.5 + 0.25 + 2 = 2.75, γ = 1.0 / 2.0 = 0.5 → 3.125
    // c: synthetic 0.5 + 0.5 + 0.5 = 1.5, γ = 1.5 / 1.75 = 6/7 → 1.0714285714285714
    let want = [1.75, 3.125, 6.0 / 7.0 * 1.0 + 1.0 / 7.0 * 1.5];
    for (got, want) in ylme::yl_predict(&beta, s2, &input).iter().zip(want) {
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }
}
