//! Population register, probability sample, and the identifier linkage
//! between the survey sample and the non-probability proxy source.
//!
//! The non-probability source `B` is carried inside the frame: a unit
//! belongs to `B` exactly when its proxy value is present.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct UnitRecord {
    pub unit_id: String,
    pub domain: String,
    pub stratum: String,
    /// Auxiliary values `x_1..x_p`; the intercept is implicit.
    pub x: Vec<f64>,
    /// Proxy value, present iff the unit is covered by the proxy source.
    pub y_star: Option<f64>,
}

impl UnitRecord {
    pub fn delta(&self) -> bool {
        self.y_star.is_some()
    }
}

#[derive(Debug, Clone)]
pub struct PopulationFrame {
    units: Vec<UnitRecord>,
    index: HashMap<String, usize>,
    x_names: Vec<String>,
    domain_sizes: BTreeMap<String, usize>,
    stratum_sizes: BTreeMap<String, usize>,
    big_data_sizes: BTreeMap<String, usize>,
}

impl PopulationFrame {
    pub fn new(units: Vec<UnitRecord>, x_names: Vec<String>) -> Result<Self> {
        let p = x_names.len();
        let mut index = HashMap::with_capacity(units.len());
        let mut domain_sizes = BTreeMap::new();
        let mut stratum_sizes = BTreeMap::new();
        let mut big_data_sizes = BTreeMap::new();
        for (i, u) in units.iter().enumerate() {
            if index.insert(u.unit_id.clone(), i).is_some() {
                return Err(Error::Integrity(format!("duplicate unit_id {:?}", u.unit_id)));
            }
            if u.x.len() != p {
                return Err(Error::Integrity(format!(
                    "unit {:?} has {} auxiliary values, expected {p}",
                    u.unit_id,
                    u.x.len()
                )));
            }
            if let Some(v) = u.x.iter().find(|v| !v.is_finite()) {
                return Err(Error::Integrity(format!(
                    "unit {:?} has non-finite auxiliary value {v}",
                    u.unit_id
                )));
            }
            if let Some(ys) = u.y_star {
                if !ys.is_finite() {
                    return Err(Error::Integrity(format!("unit {:?} has non-finite proxy", u.unit_id)));
                }
            }
            *domain_sizes.entry(u.domain.clone()).or_insert(0) += 1;
            *stratum_sizes.entry(u.stratum.clone()).or_insert(0) += 1;
            let nb = big_data_sizes.entry(u.domain.clone()).or_insert(0);
            if u.delta() {
                *nb += 1;
            }
        }
        Ok(Self {
            units,
            index,
            x_names,
            domain_sizes,
            stratum_sizes,
            big_data_sizes,
        })
    }

    pub fn units(&self) -> &[UnitRecord] {
        &self.units
    }

    pub fn unit(&self, i: usize) -> &UnitRecord {
        &self.units[i]
    }

    pub fn index_of(&self, unit_id: &str) -> Option<usize> {
        self.index.get(unit_id).copied()
    }

    pub fn x_names(&self) -> &[String] {
        &self.x_names
    }

    /// Number of auxiliary variables, excluding the intercept.
    pub fn p(&self) -> usize {
        self.x_names.len()
    }

    pub fn x_column(&self, name: &str) -> Option<usize> {
        self.x_names.iter().position(|n| n == name)
    }

    pub fn total_size(&self) -> usize {
        self.units.len()
    }

    pub fn domain_sizes(&self) -> &BTreeMap<String, usize> {
        &self.domain_sizes
    }

    pub fn stratum_sizes(&self) -> &BTreeMap<String, usize> {
        &self.stratum_sizes
    }

    pub fn domains(&self) -> impl Iterator<Item = &str> {
        self.domain_sizes.keys().map(String::as_str)
    }

    pub fn domain_size(&self, domain: &str) -> usize {
        self.domain_sizes.get(domain).copied().unwrap_or(0)
    }

    /// `N_B`, the number of units covered by the proxy source.
    pub fn big_data_size(&self) -> usize {
        self.big_data_sizes.values().sum()
    }

    /// `N_{B_m}` for one domain.
    pub fn big_data_domain_size(&self, domain: &str) -> usize {
        self.big_data_sizes.get(domain).copied().unwrap_or(0)
    }

    pub fn big_data_sizes(&self) -> &BTreeMap<String, usize> {
        &self.big_data_sizes
    }

    /// Sum of each auxiliary column over the units of a domain.
    pub fn domain_x_totals(&self, domain: &str) -> Vec<f64> {
        let mut totals = vec![0.0; self.p()];
        for u in self.units.iter().filter(|u| u.domain == domain) {
            for (t, v) in totals.iter_mut().zip(&u.x) {
                *t += v;
            }
        }
        totals
    }

    /// Replace the proxy values with those of an external `unit_id,y_star`
    /// source. Records whose id is not in the frame are dropped and counted.
    pub fn with_proxy_source<R: Read>(mut self, reader: R) -> Result<(Self, usize)> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let id_col = column(&headers, "unit_id")?;
        let ys_col = column(&headers, "y_star")?;
        for u in &mut self.units {
            u.y_star = None;
        }
        let mut rejected = 0;
        let mut seen = HashSet::new();
        for rec in rdr.records() {
            let rec = rec?;
            let id = &rec[id_col];
            let Some(&i) = self.index.get(id) else {
                rejected += 1;
                continue;
            };
            if !seen.insert(i) {
                return Err(Error::Integrity(format!("duplicate proxy record for {id:?}")));
            }
            self.units[i].y_star = Some(parse_f64(&rec[ys_col], "y_star", id)?);
        }
        if rejected > 0 {
            log::warn!("rejected {rejected} proxy records with no matching frame unit");
        }
        let x_names = std::mem::take(&mut self.x_names);
        let frame = PopulationFrame::new(self.units, x_names)?;
        Ok((frame, rejected))
    }
}

/// Column mapping for the population CSV.
#[derive(Debug, Clone)]
pub struct PopulationSchema {
    pub unit_id: String,
    pub domain: String,
    pub stratum: String,
    pub delta: String,
    pub y_star: String,
    /// Auxiliary columns; `None` takes every remaining column in header order.
    pub x: Option<Vec<String>>,
}

impl Default for PopulationSchema {
    fn default() -> Self {
        Self {
            unit_id: "unit_id".into(),
            domain: "domain".into(),
            stratum: "stratum".into(),
            delta: "delta".into(),
            y_star: "y_star".into(),
            x: None,
        }
    }
}

pub fn load_population(path: &Path, schema: &PopulationSchema) -> Result<PopulationFrame> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_population(file, schema)
}

pub fn read_population<R: Read>(reader: R, schema: &PopulationSchema) -> Result<PopulationFrame> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let id_col = column(&headers, &schema.unit_id)?;
    let dom_col = column(&headers, &schema.domain)?;
    let str_col = column(&headers, &schema.stratum)?;
    let delta_col = column(&headers, &schema.delta)?;
    let ys_col = column(&headers, &schema.y_star)?;
    let fixed = [id_col, dom_col, str_col, delta_col, ys_col];
    let x_names: Vec<String> = match &schema.x {
        Some(names) => names.clone(),
        None => headers
            .iter()
            .enumerate()
            .filter(|(i, _)| !fixed.contains(i))
            .map(|(_, h)| h.to_string())
            .collect(),
    };
    let x_cols = x_names
        .iter()
        .map(|n| column(&headers, n))
        .collect::<Result<Vec<_>>>()?;

    let mut units = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let id = rec[id_col].to_string();
        let delta = match &rec[delta_col] {
            "1" => true,
            "0" => false,
            other => {
                return Err(Error::Integrity(format!(
                    "unit {id:?}: delta must be 0 or 1, got {other:?}"
                )))
            }
        };
        let ys_raw = &rec[ys_col];
        let y_star = match (delta, ys_raw.is_empty()) {
            (true, true) => return Err(Error::Integrity(format!("unit {id:?}: delta=1 but y_star is empty"))),
            (false, false) => return Err(Error::Integrity(format!("unit {id:?}: delta=0 but y_star is present"))),
            (true, false) => Some(parse_f64(ys_raw, "y_star", &id)?),
            (false, true) => None,
        };
        let x = x_cols
            .iter()
            .zip(&x_names)
            .map(|(&c, name)| {
                let raw = &rec[c];
                if raw.is_empty() {
                    Err(Error::Integrity(format!("unit {id:?}: missing auxiliary value {name}")))
                } else {
                    parse_f64(raw, name, &id)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        units.push(UnitRecord {
            unit_id: id,
            domain: rec[dom_col].to_string(),
            stratum: rec[str_col].to_string(),
            x,
            y_star,
        });
    }
    PopulationFrame::new(units, x_names)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRow {
    pub unit_id: String,
    /// Position of the unit in the frame.
    pub unit: usize,
    pub y: f64,
    pub d: f64,
    pub stratum: String,
}

/// Stratum design metadata `(N_h, n_h)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StratumDesign {
    pub population: usize,
    pub sample: usize,
}

#[derive(Debug, Clone)]
pub struct ProbabilitySample {
    rows: Vec<SampleRow>,
    strata: BTreeMap<String, StratumDesign>,
}

impl ProbabilitySample {
    /// Build a sample from `(frame index, y, optional weight)` triples.
    ///
    /// Without a `design`, `N_h` is taken from the frame and `n_h` from the
    /// row counts. Missing weights are set to `N_h / n_h`. Rows are kept in
    /// unit-id order.
    pub fn new(
        frame: &PopulationFrame,
        entries: Vec<(usize, f64, Option<f64>)>,
        design: Option<BTreeMap<String, StratumDesign>>,
    ) -> Result<Self> {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        let mut seen = HashSet::new();
        for &(unit, y, _) in &entries {
            let u = frame
                .units
                .get(unit)
                .ok_or_else(|| Error::Linkage(format!("sample row refers to frame position {unit}")))?;
            if !seen.insert(unit) {
                return Err(Error::Integrity(format!("unit {:?} sampled twice", u.unit_id)));
            }
            if !y.is_finite() {
                return Err(Error::Integrity(format!("unit {:?} has non-finite y", u.unit_id)));
            }
            *counts.entry(u.stratum.clone()).or_insert(0) += 1;
        }
        let strata = match design {
            Some(design) => {
                for (h, &n_h) in &counts {
                    let sd = design.get(h).ok_or_else(|| {
                        Error::Design(format!("stratum {h:?} is sampled but missing from the design"))
                    })?;
                    if sd.sample != n_h {
                        return Err(Error::Design(format!(
                            "stratum {h:?}: design states n_h={} but the sample has {n_h} rows",
                            sd.sample
                        )));
                    }
                }
                for (h, sd) in &design {
                    let frame_n = frame.stratum_sizes.get(h).copied().unwrap_or(0);
                    if sd.population != frame_n {
                        return Err(Error::Design(format!(
                            "stratum {h:?}: design states N_h={} but the frame has {frame_n} units",
                            sd.population
                        )));
                    }
                    if sd.sample > 0 && !counts.contains_key(h) {
                        return Err(Error::Design(format!(
                            "stratum {h:?}: design states n_h={} but no rows were sampled",
                            sd.sample
                        )));
                    }
                }
                design
            }
            None => counts
                .iter()
                .map(|(h, &n)| {
                    let sd = StratumDesign {
                        population: frame.stratum_sizes[h],
                        sample: n,
                    };
                    (h.clone(), sd)
                })
                .collect(),
        };
        for (h, sd) in &strata {
            if sd.sample > sd.population {
                return Err(Error::Design(format!(
                    "stratum {h:?}: n_h={} exceeds N_h={}",
                    sd.sample, sd.population
                )));
            }
        }
        let mut rows = entries
            .into_iter()
            .map(|(unit, y, d)| {
                let u = &frame.units[unit];
                let sd = strata[&u.stratum];
                let d = d.unwrap_or(sd.population as f64 / sd.sample as f64);
                if !(d > 0.0) || !d.is_finite() {
                    return Err(Error::Integrity(format!(
                        "unit {:?}: design weight must be positive, got {d}",
                        u.unit_id
                    )));
                }
                Ok(SampleRow {
                    unit_id: u.unit_id.clone(),
                    unit,
                    y,
                    d,
                    stratum: u.stratum.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.sort_by(|a, b| a.unit_id.cmp(&b.unit_id));
        Ok(Self { rows, strata })
    }

    pub(crate) fn from_parts(rows: Vec<SampleRow>, strata: BTreeMap<String, StratumDesign>) -> Self {
        Self { rows, strata }
    }

    pub fn rows(&self) -> &[SampleRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn strata(&self) -> &BTreeMap<String, StratumDesign> {
        &self.strata
    }

    pub fn weights(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.d).collect()
    }

    /// `n_m`, the number of sampled units in a domain.
    pub fn domain_sample_size(&self, frame: &PopulationFrame, domain: &str) -> usize {
        self.rows.iter().filter(|r| frame.unit(r.unit).domain == domain).count()
    }
}

/// Column mapping for the sample CSV. `d` is optional.
#[derive(Debug, Clone)]
pub struct SampleSchema {
    pub unit_id: String,
    pub y: String,
    pub d: Option<String>,
}

impl Default for SampleSchema {
    fn default() -> Self {
        Self {
            unit_id: "unit_id".into(),
            y: "y".into(),
            d: Some("d".into()),
        }
    }
}

/// Load a sample file, with an optional `stratum,N_h,n_h` design file.
pub fn attach_sample(
    frame: &PopulationFrame,
    path: &Path,
    schema: &SampleSchema,
    design: Option<&Path>,
) -> Result<ProbabilitySample> {
    let design = design
        .map(|p| {
            let f = File::open(p).map_err(|e| Error::io(p, e))?;
            read_stratum_design(f)
        })
        .transpose()?;
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_sample(frame, file, schema, design)
}

pub fn read_sample<R: Read>(
    frame: &PopulationFrame,
    reader: R,
    schema: &SampleSchema,
    design: Option<BTreeMap<String, StratumDesign>>,
) -> Result<ProbabilitySample> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let id_col = column(&headers, &schema.unit_id)?;
    let y_col = column(&headers, &schema.y)?;
    // The weight column is optional even when named in the schema.
    let d_col = schema
        .d
        .as_ref()
        .and_then(|name| headers.iter().position(|h| h == name));
    let mut entries = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let id = &rec[id_col];
        let unit = frame
            .index_of(id)
            .ok_or_else(|| Error::Linkage(format!("sample unit {id:?} is not in the frame")))?;
        let y = parse_f64(&rec[y_col], &schema.y, id)?;
        let d = d_col.map(|c| parse_f64(&rec[c], "d", id)).transpose()?;
        entries.push((unit, y, d));
    }
    ProbabilitySample::new(frame, entries, design)
}

pub fn read_stratum_design<R: Read>(reader: R) -> Result<BTreeMap<String, StratumDesign>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let h_col = column(&headers, "stratum")?;
    let big_col = column(&headers, "N_h")?;
    let small_col = column(&headers, "n_h")?;
    let mut out = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let h = rec[h_col].to_string();
        let parse = |raw: &str, what: &str| {
            raw.parse::<usize>()
                .map_err(|_| Error::Schema(format!("stratum {h:?}: {what} is not a count: {raw:?}")))
        };
        let sd = StratumDesign {
            population: parse(&rec[big_col], "N_h")?,
            sample: parse(&rec[small_col], "n_h")?,
        };
        if out.insert(h.clone(), sd).is_some() {
            return Err(Error::Integrity(format!("stratum {h:?} listed twice in design")));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverlapRow {
    pub unit_id: String,
    pub y: f64,
    pub y_star: f64,
    pub x: Vec<f64>,
    pub d: f64,
    pub domain: String,
}

/// The linked overlap `A ∩ B`, ordered by unit id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LinkedOverlap {
    pub rows: Vec<OverlapRow>,
}

impl LinkedOverlap {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

pub fn link_overlap(frame: &PopulationFrame, sample: &ProbabilitySample) -> LinkedOverlap {
    let mut rows: Vec<OverlapRow> = sample
        .rows
        .iter()
        .filter_map(|r| {
            let u = frame.unit(r.unit);
            u.y_star.map(|ys| OverlapRow {
                unit_id: u.unit_id.clone(),
                y: r.y,
                y_star: ys,
                x: u.x.clone(),
                d: r.d,
                domain: u.domain.clone(),
            })
        })
        .collect();
    rows.sort_by(|a, b| a.unit_id.cmp(&b.unit_id));
    LinkedOverlap { rows }
}

/// Write the frame in the default population schema. Floats use the
/// shortest representation that parses back to the same value.
pub fn write_population<W: Write>(frame: &PopulationFrame, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["unit_id", "domain", "stratum", "delta", "y_star"];
    header.extend(frame.x_names.iter().map(String::as_str));
    w.write_record(&header)?;
    for u in &frame.units {
        let mut rec = vec![
            u.unit_id.clone(),
            u.domain.clone(),
            u.stratum.clone(),
            if u.delta() { "1" } else { "0" }.to_string(),
            u.y_star.map(|v| v.to_string()).unwrap_or_default(),
        ];
        rec.extend(u.x.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("population", e))?;
    Ok(())
}

/// Write `unit_id,y,d`.
pub fn write_sample<W: Write>(sample: &ProbabilitySample, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["unit_id", "y", "d"])?;
    for r in &sample.rows {
        w.write_record([r.unit_id.as_str(), &r.y.to_string(), &r.d.to_string()])?;
    }
    w.flush().map_err(|e| Error::io("sample", e))?;
    Ok(())
}

/// Write `stratum,N_h,n_h`.
pub fn write_stratum_design<W: Write>(strata: &BTreeMap<String, StratumDesign>, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["stratum", "N_h", "n_h"])?;
    for (h, sd) in strata {
        w.write_record([h.as_str(), &sd.population.to_string(), &sd.sample.to_string()])?;
    }
    w.flush().map_err(|e| Error::io("design", e))?;
    Ok(())
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::Schema(format!("missing column {name:?}")))
}

fn parse_f64(raw: &str, what: &str, id: &str) -> Result<f64> {
    raw.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::Schema(format!("unit {id:?}: {what} is not a finite number: {raw:?}")))
}
