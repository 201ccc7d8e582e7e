//! Stage orchestration: configuration, flat-file artifacts and the run
//! manifest.
//!
//! Every stage reads the artifacts of earlier stages from the output
//! directory and writes its own, so [`Pipeline::run`] is exactly the stages
//! executed one after another. All randomness flows from the configured
//! master seed through named sub-streams.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calibrate::{CalibrationOptions, McEstimator};
use crate::direct::{DirectEstimator, DirectKind, DomainEstimate, Estimator, Provenance};
use crate::error::{Error, Result};
use crate::fh::{self, BootstrapMode, FhInput, VarianceMethod};
use crate::frame::{self, PopulationFrame, PopulationSchema, ProbabilitySample, SampleSchema};
use crate::ipw::{self, PropensityModel};
use crate::report;
use crate::resample::{self, DomainReplicates, ReplicateValue};
use crate::rng;
use crate::sim::{self, Preset, SimConfig};
use crate::workmodel::{self, ModelSpec, Prediction};
use crate::ylme::{self, YlInput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Simulate,
    Estimate,
    Bootstrap,
    Fh,
    Yl,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Simulate,
        Stage::Estimate,
        Stage::Bootstrap,
        Stage::Fh,
        Stage::Yl,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Simulate => "simulate",
            Stage::Estimate => "estimate",
            Stage::Bootstrap => "bootstrap",
            Stage::Fh => "fh",
            Stage::Yl => "yl",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Master seed; required.
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default = "default_period")]
    pub period: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulate: Option<SimulateSection>,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub estimators: EstimatorSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workmodel: Option<ModelSpec>,
    #[serde(default)]
    pub calibration: CalibrationOptions,
    #[serde(default)]
    pub bootstrap: BootstrapSection,
    #[serde(default)]
    pub fh: FhSection,
    #[serde(default)]
    pub covariates: CovariateSection,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn default_period() -> String {
    "1".into()
}

/// Generate the input data instead of reading it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub preset: Preset,
    /// Full generator settings replacing the preset's.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub custom: Option<SimConfig>,
}

/// Input files, relative to the configuration file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub population: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub design: Option<PathBuf>,
    /// Area covariates `domain,z1[,z2,...]`; without it the area-level
    /// models are intercept-only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariates: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorSection {
    /// Direct estimators to report.
    pub direct: Vec<DirectKind>,
    /// Direct estimator behind MC fallbacks and the measurement-error model.
    /// Defaults to the preset's, else Horvitz–Thompson. Always reported.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub primary: Option<DirectKind>,
    pub mc: bool,
    pub eblup: bool,
    pub yl: bool,
}

impl Default for EstimatorSection {
    fn default() -> Self {
        Self {
            direct: vec![DirectKind::Ht, DirectKind::Hajek, DirectKind::Greg],
            primary: None,
            mc: true,
            eblup: true,
            yl: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapSection {
    /// RWY replicates `R`.
    pub replicates: usize,
    /// Pseudo-population replicates for the IPW totals.
    pub ipw_replicates: usize,
}

impl Default for BootstrapSection {
    fn default() -> Self {
        Self {
            replicates: 1000,
            ipw_replicates: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FhSource {
    Mc,
    Direct,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OriginalMse {
    /// `value² (exp(MSE_log) − 1)`.
    Delta,
    /// Back-transform inside every parametric bootstrap round.
    Bootstrap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FhSection {
    pub method: VarianceMethod,
    /// Parametric bootstrap rounds `R_B`.
    pub rounds: usize,
    pub mode: BootstrapMode,
    /// Log estimates the model smooths.
    pub input: FhSource,
    pub original_mse: OriginalMse,
}

impl Default for FhSection {
    fn default() -> Self {
        Self {
            method: VarianceMethod::Reml,
            rounds: 500,
            mode: BootstrapMode::Refit,
            input: FhSource::Mc,
            original_mse: OriginalMse::Delta,
        }
    }
}

/// Frame x columns by name; `None` uses every x column.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CovariateSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub greg: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub propensity: Option<Vec<String>>,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// SHA-256 of the canonical serialization. The output directory does
    /// not affect results and is left out.
    pub fn hash(&self) -> String {
        let canonical = PipelineConfig {
            out: PathBuf::new(),
            ..self.clone()
        };
        hex::encode(Sha256::digest(canonical.to_toml().as_bytes()))
    }

    pub fn primary(&self) -> DirectKind {
        self.estimators
            .primary
            .or(self.simulate.as_ref().map(|s| s.preset.direct()))
            .unwrap_or(DirectKind::Ht)
    }

    pub fn model(&self) -> ModelSpec {
        self.workmodel
            .or(self.simulate.as_ref().map(|s| s.preset.model()))
            .unwrap_or_default()
    }

    /// Propensity covariates: configured, else the preset's, else all.
    pub fn propensity_covariates(&self) -> Option<Vec<String>> {
        self.covariates
            .propensity
            .clone()
            .or_else(|| self.simulate.as_ref().and_then(|s| s.preset.propensity_covariates()))
    }

    /// Reported direct estimators in a fixed order, the primary included.
    pub fn direct_kinds(&self) -> Vec<DirectKind> {
        let primary = self.primary();
        [DirectKind::Ht, DirectKind::Hajek, DirectKind::Greg]
            .into_iter()
            .filter(|k| *k == primary || self.estimators.direct.contains(k))
            .collect()
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.simulate.is_some() && (self.data.population.is_some() || self.data.sample.is_some()) {
            return bad("[simulate] generates the data; drop the population and sample paths from [data]");
        }
        if self.simulate.is_none() && (self.data.population.is_none() || self.data.sample.is_none()) {
            return bad("[data] needs population and sample paths unless [simulate] is given");
        }
        if self.estimators.eblup && self.fh.input == FhSource::Mc && !self.estimators.mc {
            return bad("the area-level model smooths MC estimates; enable mc or set fh.input = \"direct\"");
        }
        if self.bootstrap.replicates < 2 || self.bootstrap.ipw_replicates < 2 {
            return bad("bootstrap replicate counts must be at least 2");
        }
        if self.fh.rounds == 0 {
            return bad("fh.rounds must be positive");
        }
        Ok(())
    }
}

/// Unit predictions `unit_id,y_hat`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub unit_id: String,
    pub y_hat: f64,
}

/// `point_estimates.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointRow {
    pub domain: String,
    pub estimator: Estimator,
    pub value: f64,
    pub n_m: usize,
    pub provenance: String,
}

/// `calibration.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub domain: String,
    pub status: String,
    pub negative_weights: usize,
    pub min_weight: f64,
    pub max_weight_ratio: f64,
    pub condition: f64,
}

/// `ipw_totals.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IpwTotalRow {
    pub domain: String,
    pub value: f64,
    pub n_b: usize,
}

/// `variances.csv`: RWY variance per domain and estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceRow {
    pub domain: String,
    pub estimator: Estimator,
    pub variance: Option<f64>,
    pub log_variance: Option<f64>,
    /// Replicates with a defined value.
    pub replicates: usize,
    pub missing: usize,
    pub nonpositive: usize,
    pub unstable: bool,
    /// Replicates in which the estimator used its fallback.
    pub fallbacks: usize,
}

/// `ipw_variances.csv`: pseudo-population log variance `Ĉ` per domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IpwVarianceRow {
    pub domain: String,
    pub log_variance: Option<f64>,
    pub replicates: usize,
    pub nonpositive: usize,
    pub unstable: bool,
}

/// `fh.csv` and `yl.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRow {
    pub domain: String,
    pub estimator: Estimator,
    pub included: bool,
    pub log_estimate: Option<f64>,
    pub psi: Option<f64>,
    pub gamma: Option<f64>,
    pub prediction_log: Option<f64>,
    pub mse_log: Option<f64>,
    pub value: f64,
    /// Input variance carried over for excluded domains.
    pub variance: Option<f64>,
    pub mse: Option<f64>,
    pub provenance: String,
}

/// `estimates.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRow {
    pub period: String,
    pub domain: String,
    pub estimator: Estimator,
    pub value: f64,
    pub variance: Option<f64>,
    pub mse: Option<f64>,
    pub rrmse: Option<f64>,
    pub quality: Option<String>,
    pub provenance: String,
}

#[derive(Debug, Serialize)]
struct FallbackEntry {
    domain: String,
    estimator: Estimator,
    provenance: String,
}

#[derive(Debug, Serialize)]
struct Manifest {
    config_sha256: String,
    seed: u64,
    period: String,
    replicates: usize,
    ipw_replicates: usize,
    fh_rounds: usize,
    fallbacks: Vec<FallbackEntry>,
    files: BTreeMap<String, String>,
}

pub const POPULATION: &str = "data/population.csv";
pub const SAMPLE: &str = "data/sample.csv";
pub const DESIGN: &str = "data/design.csv";
pub const COVARIATES: &str = "data/covariates.csv";
pub const TRUTH: &str = "data/truth.csv";
pub const REGISTER: &str = "data/register.csv";
pub const POINT_ESTIMATES: &str = "point_estimates.csv";
pub const PREDICTIONS: &str = "predictions.csv";
pub const CALIBRATION: &str = "calibration.csv";
pub const PI_HAT: &str = "pi_hat.csv";
pub const IPW_TOTALS: &str = "ipw_totals.csv";
pub const VARIANCES: &str = "variances.csv";
pub const IPW_VARIANCES: &str = "ipw_variances.csv";
pub const FH: &str = "fh.csv";
pub const YL: &str = "yl.csv";
pub const ESTIMATES: &str = "estimates.csv";
pub const QUALITY: &str = "quality.csv";
pub const QUANTILES: &str = "quantiles.csv";
pub const RRMSE_BY_DOMAIN: &str = "rrmse_by_domain.csv";
pub const MANIFEST: &str = "manifest.json";

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

fn write_rows<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(create(path)?);
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn read_rows<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut rdr = csv::Reader::from_reader(open(path)?);
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

fn provenance(s: &str) -> Result<Provenance> {
    s.parse()
}

/// Configured pipeline rooted at the directory of its configuration file.
#[derive(Debug, Clone)]
pub struct Pipeline {
    config: PipelineConfig,
    base: PathBuf,
}

struct Inputs {
    frame: PopulationFrame,
    sample: ProbabilitySample,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, base: impl Into<PathBuf>) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            base: base.into(),
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::new(PipelineConfig::from_toml(&text)?, base)
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    /// Apply changes to the configuration and validate it again.
    pub fn update(&mut self, f: impl FnOnce(&mut PipelineConfig)) -> Result<()> {
        f(&mut self.config);
        self.config.validate()
    }

    pub fn out_dir(&self) -> PathBuf {
        self.base.join(&self.config.out)
    }

    fn out(&self, name: &str) -> PathBuf {
        self.out_dir().join(name)
    }

    fn require(&self, name: &str, stage: Stage) -> Result<PathBuf> {
        let path = self.out(name);
        if path.is_file() {
            Ok(path)
        } else {
            Err(Error::Dependency {
                path,
                stage: stage.name(),
            })
        }
    }

    /// Stages `run` executes, in order.
    pub fn stages(&self) -> Vec<Stage> {
        let c = &self.config;
        Stage::ALL
            .into_iter()
            .filter(|s| match s {
                Stage::Simulate => c.simulate.is_some(),
                Stage::Fh => c.estimators.eblup,
                Stage::Yl => c.estimators.yl,
                _ => true,
            })
            .collect()
    }

    pub fn run(&self) -> Result<()> {
        for stage in self.stages() {
            self.run_stage(stage)?;
        }
        Ok(())
    }

    pub fn run_stage(&self, stage: Stage) -> Result<()> {
        log::info!("stage {stage}");
        let res = match stage {
            Stage::Simulate => self.simulate(),
            Stage::Estimate => self.estimate(),
            Stage::Bootstrap => self.bootstrap(),
            Stage::Fh => self.fh(),
            Stage::Yl => self.yl(),
            Stage::Report => self.report(),
        };
        res.map_err(|e| Error::Stage {
            stage: stage.name(),
            inner: Box::new(e),
        })
    }

    fn data_path(&self, configured: &Option<PathBuf>, simulated: &str) -> Result<Option<PathBuf>> {
        if self.config.simulate.is_some() {
            return self.require(simulated, Stage::Simulate).map(Some);
        }
        Ok(configured.as_ref().map(|p| self.base.join(p)))
    }

    fn load_inputs(&self) -> Result<Inputs> {
        let d = &self.config.data;
        let pop = self.data_path(&d.population, POPULATION)?.expect("validated");
        let sample = self.data_path(&d.sample, SAMPLE)?.expect("validated");
        let design = self.data_path(&d.design, DESIGN)?;
        let frame = frame::load_population(&pop, &PopulationSchema::default())?;
        let sample = frame::attach_sample(&frame, &sample, &SampleSchema::default(), design.as_deref())?;
        Ok(Inputs { frame, sample })
    }

    fn columns(frame: &PopulationFrame, names: &Option<Vec<String>>) -> Result<Vec<usize>> {
        match names {
            None => Ok((0..frame.p()).collect()),
            Some(names) => names
                .iter()
                .map(|n| {
                    frame
                        .x_column(n)
                        .ok_or_else(|| Error::Config(format!("frame has no auxiliary column {n:?}")))
                })
                .collect(),
        }
    }

    fn simulate(&self) -> Result<()> {
        let section = self
            .config
            .simulate
            .as_ref()
            .ok_or_else(|| Error::Config("the simulate stage needs a [simulate] section".into()))?;
        let cfg = section.custom.clone().unwrap_or_else(|| section.preset.config());
        let seed = self.config.seed;
        let pop = sim::generate_population(&cfg, rng::derive_seed(seed, "population"))?;
        let sample = pop.draw_sample(rng::derive_seed(seed, "sample"))?;
        frame::write_population(&pop.frame, create(&self.out(POPULATION))?)?;
        frame::write_sample(&sample, create(&self.out(SAMPLE))?)?;
        frame::write_stratum_design(&pop.design, create(&self.out(DESIGN))?)?;
        sim::write_covariates(&pop.covariates, create(&self.out(COVARIATES))?)?;
        sim::write_truth(&pop.truth, create(&self.out(TRUTH))?)?;
        sim::write_register(&pop, create(&self.out(REGISTER))?)?;
        Ok(())
    }

    fn mc_estimator(
        &self,
        inp: &Inputs,
        predictions: &[Prediction],
        sample: &ProbabilitySample,
    ) -> Result<McEstimator> {
        let greg = Self::columns(&inp.frame, &self.config.covariates.greg)?;
        let direct = DirectEstimator::new(&inp.frame, sample, self.config.primary(), &greg)?;
        McEstimator::new(&inp.frame, sample, predictions, direct, self.config.calibration)
    }

    fn estimate(&self) -> Result<()> {
        let inp = self.load_inputs()?;
        let (frame, sample) = (&inp.frame, &inp.sample);
        let greg = Self::columns(frame, &self.config.covariates.greg)?;
        let mut points: Vec<PointRow> = Vec::new();
        let mut push = |e: DomainEstimate| {
            points.push(PointRow {
                domain: e.domain,
                estimator: e.estimator,
                value: e.value,
                n_m: e.n_m,
                provenance: e.provenance.to_string(),
            })
        };
        for kind in self.config.direct_kinds() {
            DirectEstimator::new(frame, sample, kind, &greg)?
                .estimates(sample)
                .into_iter()
                .for_each(&mut push);
        }
        if self.config.estimators.mc {
            let overlap = frame::link_overlap(frame, sample);
            let model = workmodel::fit_or_linear(self.config.model(), &overlap)?;
            let predictions = workmodel::predict_all(&model, frame);
            let rows: Vec<PredictionRow> = predictions
                .iter()
                .map(|p| PredictionRow {
                    unit_id: p.unit_id.clone(),
                    y_hat: p.y_hat,
                })
                .collect();
            write_rows(&self.out(PREDICTIONS), &["unit_id", "y_hat"], &rows)?;
            let mc = self.mc_estimator(&inp, &predictions, sample)?;
            let (estimates, cal) = mc.estimates(sample);
            estimates.into_iter().for_each(&mut push);
            let rows: Vec<CalibrationRow> = cal
                .into_iter()
                .map(|(domain, r)| CalibrationRow {
                    domain,
                    status: r.status.to_string(),
                    negative_weights: r.diagnostics.negative_weights,
                    min_weight: r.diagnostics.min_weight,
                    max_weight_ratio: r.diagnostics.max_weight_ratio,
                    condition: r.diagnostics.condition,
                })
                .collect();
            write_rows(
                &self.out(CALIBRATION),
                &[
                    "domain",
                    "status",
                    "negative_weights",
                    "min_weight",
                    "max_weight_ratio",
                    "condition",
                ],
                &rows,
            )?;
        }
        if self.config.estimators.yl {
            let cols = Self::columns(frame, &self.config.propensity_covariates())?;
            let model = ipw::fit_propensity(frame, &cols)?;
            ipw::write_pi_hat(frame, &model, create(&self.out(PI_HAT))?)?;
            let rows: Vec<IpwTotalRow> = ipw::ipw_totals(frame, &model)
                .into_iter()
                .map(|t| IpwTotalRow {
                    domain: t.domain,
                    value: t.value,
                    n_b: t.n_b,
                })
                .collect();
            write_rows(&self.out(IPW_TOTALS), &["domain", "value", "n_b"], &rows)?;
        }
        points.sort_by(|a, b| (&a.domain, a.estimator).cmp(&(&b.domain, b.estimator)));
        write_rows(
            &self.out(POINT_ESTIMATES),
            &["domain", "estimator", "value", "n_m", "provenance"],
            &points,
        )
    }

    fn read_predictions(&self, frame: &PopulationFrame) -> Result<Vec<Prediction>> {
        let rows: Vec<PredictionRow> = read_rows(&self.require(PREDICTIONS, Stage::Estimate)?)?;
        rows.into_iter()
            .map(|r| {
                let unit = frame
                    .index_of(&r.unit_id)
                    .ok_or_else(|| Error::Linkage(format!("predicted unit {:?} is not in the frame", r.unit_id)))?;
                Ok(Prediction {
                    unit_id: r.unit_id,
                    unit,
                    y_hat: r.y_hat,
                })
            })
            .collect()
    }

    fn bootstrap(&self) -> Result<()> {
        // The estimate stage must have run; its point estimates are what
        // the variances belong to.
        self.require(POINT_ESTIMATES, Stage::Estimate)?;
        let inp = self.load_inputs()?;
        let frame = &inp.frame;
        let sample = resample::collapse_singleton_strata(&inp.sample)?;
        if sample.strata().len() != inp.sample.strata().len() {
            log::warn!("strata with a single sampled unit were collapsed for the bootstrap");
        }
        let greg = Self::columns(frame, &self.config.covariates.greg)?;
        let directs: Vec<DirectEstimator> = self
            .config
            .direct_kinds()
            .into_iter()
            .map(|k| DirectEstimator::new(frame, &sample, k, &greg))
            .collect::<Result<_>>()?;
        let mc = if self.config.estimators.mc {
            let predictions = self.read_predictions(frame)?;
            Some(self.mc_estimator(&inp, &predictions, &sample)?)
        } else {
            None
        };
        let mut tags: Vec<Estimator> = directs.iter().map(|d| d.kind.estimator()).collect();
        if mc.is_some() {
            tags.push(Estimator::Mc);
        }
        let layout = crate::direct::DomainLayout::new(frame, &sample);
        let n_dom = layout.domains.len();
        let reps = resample::rwy_bootstrap(&sample, self.config.bootstrap.replicates, self.config.seed, |w| {
            let mut out = Vec::with_capacity(tags.len() * n_dom);
            for d in &directs {
                out.extend(d.evaluate(w).into_iter().map(|v| {
                    v.map(|v| ReplicateValue {
                        value: v.value,
                        fallback: v.fallback,
                    })
                }));
            }
            if let Some(mc) = &mc {
                out.extend(mc.evaluate(w).into_iter().map(|v| {
                    v.map(|v| ReplicateValue {
                        value: v.value,
                        fallback: v.provenance != Provenance::Calibrated,
                    })
                }));
            }
            out
        })?;
        let domains: Vec<String> = layout.domains.iter().map(|i| i.domain.clone()).collect();
        let mut rows = Vec::new();
        for (e, chunk) in tags.iter().zip(reps.chunks(n_dom)) {
            let sampled: Vec<(String, DomainReplicates)> = layout
                .domains
                .iter()
                .zip(chunk)
                .filter(|(info, _)| !info.rows.is_empty())
                .map(|(info, r)| (info.domain.clone(), r.clone()))
                .collect();
            for (domain, r) in &sampled {
                let lv = r.log_variance();
                rows.push(VarianceRow {
                    domain: domain.clone(),
                    estimator: *e,
                    variance: r.variance(),
                    log_variance: lv.value,
                    replicates: r.values.len(),
                    missing: r.missing,
                    nonpositive: lv.nonpositive,
                    unstable: lv.unstable,
                    fallbacks: r.fallbacks,
                });
            }
            resample::write_replicates(
                &domains,
                chunk,
                create(&self.out(&format!("replicates_{}.csv", e.tag())))?,
            )?;
        }
        rows.sort_by(|a, b| (&a.domain, a.estimator).cmp(&(&b.domain, b.estimator)));
        write_rows(
            &self.out(VARIANCES),
            &[
                "domain",
                "estimator",
                "variance",
                "log_variance",
                "replicates",
                "missing",
                "nonpositive",
                "unstable",
                "fallbacks",
            ],
            &rows,
        )?;

        if self.config.estimators.yl {
            let pi = self.read_pi_hat(frame)?;
            let model = PropensityModel {
                coef: Vec::new(),
                covariates: Vec::new(),
                pi,
            };
            let donors = ipw::donors(frame, &model);
            let pp = resample::build_pseudo_population(donors, frame.total_size() as u64, self.config.seed)?;
            let sizes: Vec<f64> = frame.domain_sizes().values().map(|&n| n as f64).collect();
            let reps = resample::ipw_bootstrap(&pp, &sizes, self.config.bootstrap.ipw_replicates, self.config.seed)?;
            let names: Vec<String> = frame.domains().map(String::from).collect();
            let rows: Vec<IpwVarianceRow> = names
                .iter()
                .zip(&reps)
                .filter(|(d, _)| frame.big_data_domain_size(d) > 0)
                .map(|(d, r)| {
                    let lv = resample::c_star_variance(&r.values);
                    IpwVarianceRow {
                        domain: d.clone(),
                        log_variance: lv.value,
                        replicates: r.values.len(),
                        nonpositive: lv.nonpositive,
                        unstable: lv.unstable,
                    }
                })
                .collect();
            resample::write_replicates(&names, &reps, create(&self.out("replicates_IPW.csv"))?)?;
            write_rows(
                &self.out(IPW_VARIANCES),
                &["domain", "log_variance", "replicates", "nonpositive", "unstable"],
                &rows,
            )?;
        }
        Ok(())
    }

    fn read_pi_hat(&self, frame: &PopulationFrame) -> Result<Vec<f64>> {
        #[derive(Deserialize)]
        struct Row {
            unit_id: String,
            pi_hat: f64,
        }
        let rows: Vec<Row> = read_rows(&self.require(PI_HAT, Stage::Estimate)?)?;
        let mut pi = vec![f64::NAN; frame.units().len()];
        for r in rows {
            let i = frame
                .index_of(&r.unit_id)
                .ok_or_else(|| Error::Linkage(format!("propensity for unknown unit {:?}", r.unit_id)))?;
            pi[i] = r.pi_hat;
        }
        if let Some(u) = frame.units().iter().zip(&pi).find(|(_, p)| p.is_nan()) {
            return Err(Error::Integrity(format!("no propensity for unit {:?}", u.0.unit_id)));
        }
        Ok(pi)
    }

    fn read_points(&self) -> Result<Vec<PointRow>> {
        read_rows(&self.require(POINT_ESTIMATES, Stage::Estimate)?)
    }

    fn read_variances(&self) -> Result<BTreeMap<(String, Estimator), VarianceRow>> {
        let rows: Vec<VarianceRow> = read_rows(&self.require(VARIANCES, Stage::Bootstrap)?)?;
        Ok(rows.into_iter().map(|r| ((r.domain.clone(), r.estimator), r)).collect())
    }

    /// Area covariate row without intercept; empty when no covariate file is
    /// configured, `None` when the file lacks the domain.
    fn area_covariates<'a>(covariates: &'a Option<BTreeMap<String, Vec<f64>>>, domain: &str) -> Option<&'a [f64]> {
        match covariates {
            None => Some(&[]),
            Some(map) => map.get(domain).map(Vec::as_slice),
        }
    }

    fn covariates(&self) -> Result<Option<BTreeMap<String, Vec<f64>>>> {
        self.data_path(&self.config.data.covariates, COVARIATES)?
            .map(|p| sim::read_covariates(open(&p)?))
            .transpose()
    }

    fn fh(&self) -> Result<()> {
        let points = self.read_points()?;
        let variances = self.read_variances()?;
        let covariates = self.covariates()?;
        let source = match self.config.fh.input {
            FhSource::Mc => Estimator::Mc,
            FhSource::Direct => self.config.primary().estimator(),
        };
        let mut rows = Vec::new();
        let (mut domains, mut y, mut psi, mut z) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for p in points.iter().filter(|p| p.estimator == source) {
            let v = variances.get(&(p.domain.clone(), source));
            let lv = v
                .filter(|v| !v.unstable)
                .and_then(|v| v.log_variance)
                .filter(|&lv| lv > 0.0);
            let zc = Self::area_covariates(&covariates, &p.domain);
            match (p.value > 0.0, lv, zc) {
                (true, Some(lv), Some(zc)) => {
                    domains.push(p.domain.clone());
                    y.push(p.value.ln());
                    psi.push(lv);
                    z.push(zc.to_vec());
                }
                _ => {
                    log::warn!(
                        "domain {} excluded from the area-level model; reporting {source}",
                        p.domain
                    );
                    rows.push(fallback_row(p, Estimator::Eblup, v.and_then(|v| v.variance)));
                }
            }
        }
        let input = FhInput::with_intercept(domains, y, psi, z);
        let fit = fh::fit_fh(&input, self.config.fh.method)?;
        let mse = fh::fh_mse_parametric_bootstrap(
            &fit,
            &input,
            self.config.fh.rounds,
            self.config.seed,
            self.config.fh.mode,
        )?;
        for i in 0..input.len() {
            let bt = fh::back_transform(fit.eblup_log[i], mse.mse_log[i]);
            let mse_orig = match self.config.fh.original_mse {
                OriginalMse::Delta => bt.mse,
                OriginalMse::Bootstrap => mse.mse_orig[i],
            };
            rows.push(ModelRow {
                domain: input.domains[i].clone(),
                estimator: Estimator::Eblup,
                included: true,
                log_estimate: Some(input.y[i]),
                psi: Some(input.psi[i]),
                gamma: Some(fit.gamma[i]),
                prediction_log: Some(fit.eblup_log[i]),
                mse_log: Some(mse.mse_log[i]),
                value: bt.value,
                variance: None,
                mse: Some(mse_orig),
                provenance: Provenance::Model.to_string(),
            });
        }
        write_model_rows(&self.out(FH), rows)
    }

    fn yl(&self) -> Result<()> {
        let points = self.read_points()?;
        let variances = self.read_variances()?;
        let covariates = self.covariates()?;
        let ipw: BTreeMap<String, IpwTotalRow> = read_rows::<IpwTotalRow>(&self.require(IPW_TOTALS, Stage::Estimate)?)?
            .into_iter()
            .map(|r| (r.domain.clone(), r))
            .collect();
        let ipw_var: BTreeMap<String, IpwVarianceRow> =
            read_rows::<IpwVarianceRow>(&self.require(IPW_VARIANCES, Stage::Bootstrap)?)?
                .into_iter()
                .map(|r| (r.domain.clone(), r))
                .collect();
        let source = self.config.primary().estimator();
        let mut rows = Vec::new();
        let mut input = YlInput {
            domains: Vec::new(),
            y: Vec::new(),
            psi: Vec::new(),
            z: Vec::new(),
            z_star: Vec::new(),
            c: Vec::new(),
        };
        for p in points.iter().filter(|p| p.estimator == source) {
            let v = variances.get(&(p.domain.clone(), source));
            let lv = v
                .filter(|v| !v.unstable)
                .and_then(|v| v.log_variance)
                .filter(|&lv| lv > 0.0);
            let aux = ipw.get(&p.domain).filter(|t| t.value > 0.0);
            let c = ipw_var
                .get(&p.domain)
                .filter(|c| !c.unstable)
                .and_then(|c| c.log_variance);
            let zc = Self::area_covariates(&covariates, &p.domain);
            match (p.value > 0.0, lv, aux, c, zc) {
                (true, Some(lv), Some(aux), Some(c), Some(zc)) => {
                    input.domains.push(p.domain.clone());
                    input.y.push(p.value.ln());
                    input.psi.push(lv);
                    input.z.push(std::iter::once(1.0).chain(zc.iter().copied()).collect());
                    input.z_star.push(aux.value.ln());
                    input.c.push(c);
                }
                _ => {
                    log::warn!(
                        "domain {} excluded from the measurement-error model; reporting {source}",
                        p.domain
                    );
                    rows.push(fallback_row(p, Estimator::Yl, v.and_then(|v| v.variance)));
                }
            }
        }
        let fit = ylme::fit_yl(&input)?;
        let mse = ylme::yl_jackknife_mse(&input, &fit)?;
        for i in 0..input.len() {
            let bt = ylme::yl_back_transform(fit.prediction_log[i], mse.mse_log[i]);
            rows.push(ModelRow {
                domain: input.domains[i].clone(),
                estimator: Estimator::Yl,
                included: true,
                log_estimate: Some(input.y[i]),
                psi: Some(input.psi[i]),
                gamma: Some(fit.gamma[i]),
                prediction_log: Some(fit.prediction_log[i]),
                mse_log: Some(mse.mse_log[i]),
                value: bt.value,
                variance: None,
                mse: Some(bt.mse),
                provenance: Provenance::Model.to_string(),
            });
        }
        write_model_rows(&self.out(YL), rows)
    }

    fn report(&self) -> Result<()> {
        let points = self.read_points()?;
        let variances = match self.require(VARIANCES, Stage::Bootstrap) {
            Ok(_) => self.read_variances()?,
            Err(_) => {
                log::warn!("no bootstrap variances; direct and MC estimates stay unclassified");
                BTreeMap::new()
            }
        };
        let mut estimates: Vec<DomainEstimate> = Vec::new();
        for p in &points {
            let mut e = DomainEstimate::new(&p.domain, p.estimator, p.value, p.n_m, provenance(&p.provenance)?);
            if let Some(v) = variances.get(&(p.domain.clone(), p.estimator)) {
                e.variance = v.variance;
                e.log_variance = v.log_variance;
            }
            estimates.push(e);
        }
        let n_m: BTreeMap<&str, usize> = points.iter().map(|p| (p.domain.as_str(), p.n_m)).collect();
        for (enabled, file, stage) in [
            (self.config.estimators.eblup, FH, Stage::Fh),
            (self.config.estimators.yl, YL, Stage::Yl),
        ] {
            if !enabled {
                continue;
            }
            for r in read_rows::<ModelRow>(&self.require(file, stage)?)? {
                let n = n_m.get(r.domain.as_str()).copied().unwrap_or(0);
                let mut e = DomainEstimate::new(&r.domain, r.estimator, r.value, n, provenance(&r.provenance)?);
                e.variance = r.variance;
                e.mse = r.mse;
                e.log_variance = r.psi;
                estimates.push(e);
            }
        }
        for e in &mut estimates {
            e.refresh_rrmse();
        }
        estimates.sort_by(|a, b| (&a.domain, a.estimator).cmp(&(&b.domain, b.estimator)));

        let period = self.config.period.as_str();
        let rows: Vec<EstimateRow> = estimates
            .iter()
            .map(|e| EstimateRow {
                period: period.to_string(),
                domain: e.domain.clone(),
                estimator: e.estimator,
                value: e.value,
                variance: e.variance,
                mse: e.mse,
                rrmse: e.rrmse,
                quality: e.quality.map(|q| q.to_string()),
                provenance: e.provenance.to_string(),
            })
            .collect();
        write_rows(
            &self.out(ESTIMATES),
            &[
                "period",
                "domain",
                "estimator",
                "value",
                "variance",
                "mse",
                "rrmse",
                "quality",
                "provenance",
            ],
            &rows,
        )?;
        let tagged = || estimates.iter().map(|e| (period, e));
        report::write_quality(&report::classify(tagged()), create(&self.out(QUALITY))?)?;
        report::write_quantiles(&report::quantile_summary(tagged()), create(&self.out(QUANTILES))?)?;
        report::write_rrmse_long(tagged(), create(&self.out(RRMSE_BY_DOMAIN))?)?;

        let fallbacks = estimates
            .iter()
            .filter(|e| {
                matches!(
                    e.provenance,
                    Provenance::FallbackDirect(_) | Provenance::FallbackInput(_)
                )
            })
            .map(|e| FallbackEntry {
                domain: e.domain.clone(),
                estimator: e.estimator,
                provenance: e.provenance.to_string(),
            })
            .collect();
        let manifest = Manifest {
            config_sha256: self.config.hash(),
            seed: self.config.seed,
            period: self.config.period.clone(),
            replicates: self.config.bootstrap.replicates,
            ipw_replicates: self.config.bootstrap.ipw_replicates,
            fh_rounds: self.config.fh.rounds,
            fallbacks,
            files: self.artifact_hashes()?,
        };
        let mut w = create(&self.out(MANIFEST))?;
        serde_json::to_writer_pretty(&mut w, &manifest).map_err(|e| Error::Integrity(e.to_string()))?;
        w.write_all(b"\n").map_err(|e| Error::io(MANIFEST, e))?;
        w.flush().map_err(|e| Error::io(MANIFEST, e))
    }

    /// SHA-256 of every artifact in the output directory except the
    /// manifest, keyed by relative path.
    fn artifact_hashes(&self) -> Result<BTreeMap<String, String>> {
        let root = self.out_dir();
        let mut out = BTreeMap::new();
        let mut stack = vec![root.clone()];
        while let Some(dir) = stack.pop() {
            for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
                let path = entry.map_err(|e| Error::io(&dir, e))?.path();
                if path.is_dir() {
                    stack.push(path);
                    continue;
                }
                let rel = path
                    .strip_prefix(&root)
                    .expect("inside root")
                    .to_string_lossy()
                    .replace('\\', "/");
                if rel == MANIFEST {
                    continue;
                }
                let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
                out.insert(rel, hex::encode(Sha256::digest(&bytes)));
            }
        }
        Ok(out)
    }
}

fn fallback_row(p: &PointRow, estimator: Estimator, variance: Option<f64>) -> ModelRow {
    ModelRow {
        domain: p.domain.clone(),
        estimator,
        included: false,
        log_estimate: None,
        psi: None,
        gamma: None,
        prediction_log: None,
        mse_log: None,
        value: p.value,
        variance,
        mse: None,
        provenance: Provenance::FallbackInput(p.estimator).to_string(),
    }
}

fn write_model_rows(path: &Path, mut rows: Vec<ModelRow>) -> Result<()> {
    rows.sort_by(|a, b| a.domain.cmp(&b.domain));
    write_rows(
        path,
        &[
            "domain",
            "estimator",
            "included",
            "log_estimate",
            "psi",
            "gamma",
            "prediction_log",
            "mse_log",
            "value",
            "variance",
            "mse",
            "provenance",
        ],
        &rows,
    )
}

/// Read an `estimates.csv` written by the report stage.
pub fn read_estimates(path: &Path) -> Result<Vec<EstimateRow>> {
    read_rows(path)
}

/// Distinct estimators in a list of estimate rows.
pub fn estimators_present(rows: &[EstimateRow]) -> BTreeSet<Estimator> {
    rows.iter().map(|r| r.estimator).collect()
}
