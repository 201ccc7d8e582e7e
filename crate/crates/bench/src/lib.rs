//! Shared fixtures for the benchmarks: a simulated preset with its sample
//! and MC estimator.

use mcsae::calibrate::{CalibrationOptions, McEstimator};
use mcsae::direct::DirectEstimator;
use mcsae::frame;
use mcsae::sim::{self, Preset, SimPopulation};
use mcsae::workmodel;
use mcsae::ProbabilitySample;

pub struct Fixture {
    pub pop: SimPopulation,
    pub sample: ProbabilitySample,
    pub mc: McEstimator,
}

impl Fixture {
    pub fn new(preset: Preset, seed: u64) -> Self {
        let pop = sim::generate_population(&preset.config(), seed).expect("preset population");
        let sample = pop.draw_sample(seed).expect("preset sample");
        let cols: Vec<usize> = (0..pop.frame.p()).collect();
        let direct = DirectEstimator::new(&pop.frame, &sample, preset.direct(), &cols).expect("direct estimator");
        let overlap = frame::link_overlap(&pop.frame, &sample);
        let model = workmodel::fit_or_linear(preset.model(), &overlap).expect("working model");
        let predictions = workmodel::predict_all(&model, &pop.frame);
        let mc = McEstimator::new(&pop.frame, &sample, &predictions, direct, CalibrationOptions::default())
            .expect("MC estimator");
        Self { pop, sample, mc }
    }
}
